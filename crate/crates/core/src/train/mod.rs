//! Optimization: Adam over the encoder and hypernetwork, the training loop,
//! evaluation, and checkpoints.

mod adam;
pub mod checkpoint;

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

pub use adam::{adam_step, clip_global_norm, AdamState};
pub use checkpoint::{CheckpointError, CheckpointMeta};

use crate::data::{epoch_batches, Dataset};
use crate::model::{bind, bind_constant, forward, Model, ModelConfig, ModelError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite gradient for {name}")]
    NonFiniteGradient { name: String },
    #[error("gradient for {name} has shape {got:?}, parameter is {expected:?}")]
    Shape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },
    #[error("dataset images are {got}px, model expects {expected}px")]
    ImageSize { expected: usize, got: usize },
    #[error("empty dataset")]
    Empty,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    All,
    /// Hypernetwork weights are bound as constants and never updated.
    EncoderOnly,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
    /// Seeds batch shuffles and posterior noise.
    pub seed: u64,
    pub trainable: Trainable,
    /// Samples per gradient shard. Shards are reduced in a fixed order, so
    /// results do not depend on how many threads evaluate them.
    pub shard_size: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { lr: 4e-5, batch_size: 32, clip_norm: 10.0, seed: 0, trainable: Trainable::All, shard_size: 8 }
    }
}

/// Batch means of the objective terms for one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub recon: f64,
    pub part_reg: f64,
    pub kl: f64,
    pub total: f64,
}

pub const METRICS_HEADER: &str = "step,recon,part_reg,kl,total";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{},{}", self.step, self.recon, self.part_reg, self.kl, self.total)
    }
}

pub fn write_metrics(mut w: impl Write, log: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(w, "{METRICS_HEADER}")?;
    for m in log {
        writeln!(w, "{}", m.csv_row())?;
    }
    Ok(())
}

struct ShardResult {
    grads: Vec<Tensor<f32>>,
    sums: [f64; 4],
}

/// Loss and gradients for one shard; gradients are for the shard mean.
fn shard_gradients(
    model: &Model<Tensor<f32>>,
    cfg: &ModelConfig,
    images: Tensor<f32>,
    noise: Tensor<f32>,
    trainable: Trainable,
) -> Result<ShardResult, ModelError> {
    let mut tape = Tape::<f32>::new();
    let m: Model<Var> = match trainable {
        Trainable::All => bind(&mut tape, model),
        Trainable::EncoderOnly => {
            let encoder = model.encoder.map(&mut |t| tape.var(t.clone()));
            let hyper = model.hyper.map(&mut |t| tape.constant(t.clone()));
            Model { encoder, hyper }
        }
    };
    let x = tape.constant(images);
    let f = forward(&mut tape, &m, x, Some(noise), cfg)?;
    let sum = |v: Var| tape.value(v).data().iter().map(|&x| x as f64).sum::<f64>();
    let (recon, part_reg, kl) = (sum(f.terms.recon), sum(f.terms.part_reg), sum(f.terms.kl));
    let total = recon + part_reg + cfg.beta * kl;
    let g = tape.backward(f.total)?;
    let vars: Vec<Var> = match trainable {
        Trainable::All => m.params().into_iter().map(|(_, v)| *v).collect(),
        Trainable::EncoderOnly => m.encoder.params().into_iter().map(|(_, v)| *v).collect(),
    };
    Ok(ShardResult { grads: vars.into_iter().map(|v| g.wrt(v)).collect(), sums: [recon, part_reg, kl, total] })
}

/// Stateful optimizer loop; resumable across calls to [`Trainer::run`].
pub struct Trainer {
    pub model: Model<Tensor<f32>>,
    pub config: ModelConfig,
    pub options: TrainOptions,
    pub adam: AdamState<f32>,
    pub step: usize,
    pub log: Vec<StepMetrics>,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model<Tensor<f32>>, config: ModelConfig, options: TrainOptions) -> Self {
        let adam = AdamState::new(options.lr, model.params().iter().map(|(_, t)| t.len()));
        let mut noise_rng = ChaCha8Rng::seed_from_u64(options.seed);
        noise_rng.set_stream(u64::MAX);
        Trainer { model, config, options, adam, step: 0, log: vec![], noise_rng }
    }

    fn trainable_slots(&self) -> Vec<usize> {
        let n_enc = self.model.encoder.params().len();
        match self.options.trainable {
            Trainable::All => (0..self.model.params().len()).collect(),
            Trainable::EncoderOnly => (0..n_enc).collect(),
        }
    }

    /// One optimizer step on `images` (`[B,S,S]`).
    pub fn step_batch(&mut self, images: &Tensor<f32>) -> Result<StepMetrics, TrainError> {
        let b = images.shape()[0];
        let z = self.config.z_dim;
        let noise: Vec<f32> = (0..b * z).map(|_| StandardNormal.sample(&mut self.noise_rng)).collect();
        let shard = self.options.shard_size.max(1);
        let jobs: Vec<(Tensor<f32>, Tensor<f32>)> = (0..b)
            .step_by(shard)
            .map(|s| {
                let idx: Vec<usize> = (s..(s + shard).min(b)).collect();
                let imgs = Tensor::stack(&idx.iter().map(|&i| images.select(i)).collect::<Vec<_>>()).expect("shard stack");
                let nz = Tensor::new([idx.len(), z], noise[s * z..(s + idx.len()) * z].to_vec()).expect("noise shape");
                (imgs, nz)
            })
            .collect();
        let (model, cfg, trainable) = (&self.model, &self.config, self.options.trainable);
        let results: Vec<Result<ShardResult, ModelError>> =
            jobs.into_par_iter().map(|(x, n)| shard_gradients(model, cfg, x, n, trainable)).collect();

        let mut grads: Option<Vec<Tensor<f32>>> = None;
        let mut sums = [0.0f64; 4];
        let mut offset = 0;
        for r in results {
            let r = r.map_err(|e| match e {
                ModelError::NonFinite { level, step } => {
                    TrainError::Diverged { step: self.step, reason: format!("non-finite value at level {level}, step {step}") }
                }
                e => e.into(),
            })?;
            let n = (b - offset).min(shard);
            let w = n as f32 / b as f32;
            offset += n;
            for (s, v) in sums.iter_mut().zip(r.sums) {
                *s += v;
            }
            match &mut grads {
                None => {
                    grads = Some(
                        r.grads
                            .into_iter()
                            .map(|mut g| {
                                g.data_mut().iter_mut().for_each(|v| *v *= w);
                                g
                            })
                            .collect(),
                    )
                }
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(r.grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(d, &x)| *d += w * x);
                    }
                }
            }
        }
        let mut grads = grads.ok_or(TrainError::Empty)?;
        let metrics = StepMetrics {
            step: self.step,
            recon: sums[0] / b as f64,
            part_reg: sums[1] / b as f64,
            kl: sums[2] / b as f64,
            total: sums[3] / b as f64,
        };
        if !metrics.total.is_finite() {
            return Err(TrainError::Diverged { step: self.step, reason: format!("loss is {}", metrics.total) });
        }
        clip_global_norm(&mut grads, self.options.clip_norm);
        let slots = self.trainable_slots();
        let mut params: Vec<(String, &mut Tensor<f32>)> = match self.options.trainable {
            Trainable::All => self.model.params_mut(),
            Trainable::EncoderOnly => self.model.encoder.params_mut(),
        };
        adam_step(&mut self.adam, &mut params, &grads, &slots)?;
        self.log.push(metrics);
        self.step += 1;
        Ok(metrics)
    }

    /// Runs `steps` more optimizer steps over seeded epoch shuffles of `ds`,
    /// continuing from the current step count. On divergence the model is
    /// left at the last good weights and the error is returned.
    pub fn run(&mut self, ds: &Dataset, steps: usize) -> Result<(), TrainError> {
        if ds.is_empty() {
            return Err(TrainError::Empty);
        }
        if ds.image_size() != self.config.image_size() {
            return Err(TrainError::ImageSize { expected: self.config.image_size(), got: ds.image_size() });
        }
        let per_epoch = ds.len().div_ceil(self.options.batch_size);
        let mut cached: Option<(usize, Vec<Vec<usize>>)> = None;
        for _ in 0..steps {
            let epoch = self.step / per_epoch;
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                cached = Some((epoch, epoch_batches(ds.len(), self.options.batch_size, self.options.seed, epoch as u64)));
            }
            let idx = &cached.as_ref().unwrap().1[self.step % per_epoch];
            let images = ds.gather(idx);
            let before = self.model.clone();
            let adam_before = self.adam.clone();
            match self.step_batch(&images) {
                Ok(_) if self.model.params().iter().all(|(_, t)| t.is_finite()) => {}
                Ok(_) => {
                    self.model = before;
                    self.adam = adam_before;
                    return Err(TrainError::Diverged { step: self.step - 1, reason: "non-finite weights".into() });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, ds: &Dataset) -> usize {
        ds.len().div_ceil(self.options.batch_size)
    }
}

/// Trains a fresh or given model for `steps` steps and returns it with the
/// per-step log.
pub fn fit(
    model: Model<Tensor<f32>>,
    config: &ModelConfig,
    options: &TrainOptions,
    ds: &Dataset,
    steps: usize,
) -> Result<(Model<Tensor<f32>>, Vec<StepMetrics>), TrainError> {
    let mut t = Trainer::new(model, config.clone(), options.clone());
    t.run(ds, steps)?;
    Ok((t.model, t.log))
}

/// Dataset-level means under zero posterior noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub recon: f64,
    pub part_reg: f64,
    pub kl: f64,
    pub total: f64,
    /// Mean per-pixel squared reconstruction error.
    pub mse: f64,
}

/// Per-image `[recon, part_reg, kl]` under zero noise, evaluated in
/// parallel chunks.
pub fn per_image_terms(model: &Model<Tensor<f32>>, cfg: &ModelConfig, ds: &Dataset) -> Result<Vec<[f64; 3]>, ModelError> {
    const CHUNK: usize = 32;
    let chunks: Vec<Vec<usize>> = (0..ds.len()).collect::<Vec<_>>().chunks(CHUNK).map(|c| c.to_vec()).collect();
    let parts: Vec<Result<Vec<[f64; 3]>, ModelError>> = chunks
        .par_iter()
        .map(|idx| {
            let mut tape = Tape::<f32>::new();
            let m = bind_constant(&mut tape, model);
            let x = tape.constant(ds.gather(idx));
            let f = forward(&mut tape, &m, x, None, cfg)?;
            let col = |v: Var| tape.value(v).data().to_vec();
            let (r, p, k) = (col(f.terms.recon), col(f.terms.part_reg), col(f.terms.kl));
            Ok((0..idx.len()).map(|i| [r[i] as f64, p[i] as f64, k[i] as f64]).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(ds.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn evaluate(model: &Model<Tensor<f32>>, cfg: &ModelConfig, ds: &Dataset) -> Result<EvalMetrics, ModelError> {
    let terms = per_image_terms(model, cfg, ds)?;
    let n = terms.len() as f64;
    let mean = |k: usize| terms.iter().map(|t| t[k]).sum::<f64>() / n;
    let (recon, part_reg, kl) = (mean(0), mean(1), mean(2));
    let pixels = (ds.image_size() * ds.image_size()) as f64;
    Ok(EvalMetrics { recon, part_reg, kl, total: recon + part_reg + cfg.beta * kl, mse: recon / pixels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_strokes, SynthSpec};

    fn small() -> (ModelConfig, Dataset) {
        let cfg = ModelConfig { z_dim: 8, ..ModelConfig::default() }.with_steps(2, 2);
        let (ds, _) = synth_strokes(&SynthSpec::standard(12, 3)).unwrap();
        (cfg, ds)
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (cfg, ds) = small();
        let init = Model::<Tensor<f32>>::init(&cfg).unwrap();
        let (model, log) = fit(init.clone(), &cfg, &TrainOptions::default(), &ds, 0).unwrap();
        assert_eq!(model, init);
        assert!(log.is_empty());
    }

    #[test]
    fn encoder_only_leaves_hypernet_bitwise() {
        let (cfg, ds) = small();
        let init = Model::<Tensor<f32>>::init(&cfg).unwrap();
        let opts = TrainOptions { trainable: Trainable::EncoderOnly, batch_size: 4, lr: 1e-3, ..TrainOptions::default() };
        let (model, log) = fit(init.clone(), &cfg, &opts, &ds, 3).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(model.hyper, init.hyper);
        assert_ne!(model.encoder, init.encoder);
    }

    #[test]
    fn shard_count_does_not_change_the_loss_much_and_runs_repeat_bitwise() {
        let (cfg, ds) = small();
        let init = Model::<Tensor<f32>>::init(&cfg).unwrap();
        let run = |shard| {
            let opts = TrainOptions { batch_size: 6, shard_size: shard, ..TrainOptions::default() };
            fit(init.clone(), &cfg, &opts, &ds, 2).unwrap().1
        };
        let a = run(2);
        assert_eq!(a, run(2));
        let b = run(6);
        assert!((a[0].total - b[0].total).abs() < 1e-3 * a[0].total.abs());
    }

    #[test]
    fn metrics_csv_has_header_and_rows() {
        let log = vec![StepMetrics { step: 0, recon: 1.0, part_reg: 2.0, kl: 3.0, total: 6.0 }];
        let mut buf = vec![];
        write_metrics(&mut buf, &log).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,recon,part_reg,kl,total\n0,1,2,3,6\n");
    }

    #[test]
    fn evaluate_mse_is_recon_per_pixel() {
        let (cfg, ds) = small();
        let model = Model::<Tensor<f32>>::init(&cfg).unwrap();
        let m = evaluate(&model, &cfg, &ds).unwrap();
        assert!((m.mse * 784.0 - m.recon).abs() < 1e-9);
        assert!(m.total >= m.recon);
    }
}
