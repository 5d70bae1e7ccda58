//! The `rnp` command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 I/O or
//! malformed input, 3 numeric failure (divergence, non-finite values, a
//! failed gradient check).

mod image;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

pub use image::{color, color_name, overlay, PALETTE};

use crate::data::{load_idx, synth_strokes, DataError, Dataset, SynthSpec};
use crate::gradcheck;
use crate::model::{bind_constant, encode, forward, generate, Model, ModelConfig, ModelError, ParseTree};
use crate::stn::{action_constants, warp, AffineAction};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{
    checkpoint::{self, CheckpointError, CheckpointMeta},
    evaluate, write_metrics, TrainError, TrainOptions, Trainable, Trainer,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) | DataError::OutOfBounds(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) | ModelError::Stn(_) => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(m) => m.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::ImageSize { .. } | TrainError::Empty => CliError::Usage(e.to_string()),
            _ => CliError::Numeric(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "rnp", version, about = "Recursive neural programs: train, parse, sample and transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus a per-step metrics CSV.
    Train(TrainArgs),
    /// Write canvas, part overlays and sub-part grids for dataset images.
    Parse(ParseArgs),
    /// Decode programs drawn from the standard normal prior.
    Sample(SampleArgs),
    /// Decode a straight line between two programs.
    Interpolate(InterpolateArgs),
    /// Train without one class, then fine-tune only the encoder on it.
    Transfer(TransferArgs),
    /// Write posterior means and every part program as CSV.
    ExportLatents(ExportArgs),
    /// Run the 64-bit gradient-check suite.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// IDX image file (optionally gzipped).
    #[arg(long, requires = "labels", conflicts_with = "synth")]
    images: Option<PathBuf>,
    /// IDX label file matching --images.
    #[arg(long, requires = "images")]
    labels: Option<PathBuf>,
    /// Use N images of the built-in synthetic stroke corpus.
    #[arg(long, value_name = "N")]
    synth: Option<usize>,
    #[arg(long, default_value_t = 0)]
    synth_seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, CliError> {
        match (&self.images, &self.labels, self.synth) {
            (Some(i), Some(l), None) => Ok(load_idx(i, l)?),
            (None, None, Some(n)) => Ok(synth_strokes(&SynthSpec::standard(n, self.synth_seed))?.0),
            _ => Err(CliError::Usage("give either --images and --labels, or --synth N".into())),
        }
    }
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    z_dim: usize,
    /// Parts per image.
    #[arg(long, default_value_t = 4)]
    tau_top: usize,
    /// Sub-parts per part.
    #[arg(long, default_value_t = 4)]
    tau_sub: usize,
    #[arg(long, default_value_t = 1.0)]
    beta: f64,
    /// Initialization seed; also seeds shuffles and posterior noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ModelArgs {
    fn config(&self) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig { z_dim: self.z_dim, beta: self.beta, seed: self.seed, ..ModelConfig::default() }
            .with_steps(self.tau_top, self.tau_sub);
        if cfg.z_dim == 0 || cfg.steps.contains(&0) {
            return Err(CliError::Usage("z-dim and step counts must be positive".into()));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
struct OptimArgs {
    /// Optimizer steps; overrides --epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 4e-5)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
}

impl OptimArgs {
    fn options(&self, seed: u64, trainable: Trainable) -> Result<TrainOptions, CliError> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(CliError::Usage("batch and lr must be positive".into()));
        }
        Ok(TrainOptions { lr: self.lr, batch_size: self.batch, seed, trainable, ..TrainOptions::default() })
    }

    fn step_count(&self, n: usize) -> usize {
        self.steps.unwrap_or(self.epochs * n.div_ceil(self.batch.max(1)))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV; defaults to the checkpoint path with a .csv extension.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Dataset indices to parse.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    index: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbour upscale factor for PNGs.
    #[arg(long, default_value_t = 1)]
    zoom: usize,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    zoom: usize,
}

#[derive(Args, Debug)]
struct InterpolateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Start point: a dataset index or `class:C` for a class mean.
    #[arg(long)]
    from: String,
    /// End point, same forms as --from.
    #[arg(long)]
    to: String,
    /// Number of decodes including both endpoints.
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    zoom: usize,
}

#[derive(Args, Debug)]
struct TransferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    optim: OptimArgs,
    /// Class left out of base training.
    #[arg(long)]
    holdout: u32,
    /// Encoder-only fine-tuning steps on the held-out class.
    #[arg(long, default_value_t = 300)]
    transfer_steps: usize,
    #[arg(long, default_value_t = 4e-4)]
    transfer_lr: f64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Sampled coordinates per parameter tensor in the full-model check.
    #[arg(long, default_value_t = 3)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code. Errors are reported on stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// `RNP_THREADS` caps the worker pool. Setting it twice in one process is
/// harmless: the first pool wins.
fn configure_threads() {
    if let Some(n) = std::env::var("RNP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|&n| n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Parse(a) => parse(a),
        Command::Sample(a) => sample(a),
        Command::Interpolate(a) => interpolate(a),
        Command::Transfer(a) => transfer(a),
        Command::ExportLatents(a) => export_latents(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn check_size(cfg: &ModelConfig, ds: &Dataset) -> Result<(), CliError> {
    if ds.image_size() != cfg.image_size() {
        return Err(CliError::Usage(format!("model expects {0}×{0} images, dataset has {1}×{1}", cfg.image_size(), ds.image_size())));
    }
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let ds = a.data.load()?;
    let cfg = a.model.config()?;
    check_size(&cfg, &ds)?;
    let opts = a.optim.options(cfg.seed, Trainable::All)?;
    let steps = a.optim.step_count(ds.len());
    let model = Model::<Tensor<f32>>::init(&cfg)?;
    let mut trainer = Trainer::new(model, cfg.clone(), opts);
    let result = trainer.run(&ds, steps);
    let meta = CheckpointMeta { config: cfg, dataset: ds.name.clone() };
    // The last good weights are saved even when training diverges.
    checkpoint::save(&a.out, &trainer.model, &meta)?;
    let metrics = a.metrics.unwrap_or_else(|| a.out.with_extension("csv"));
    let file = fs::File::create(&metrics).map_err(|e| io_err(&metrics, e))?;
    write_metrics(std::io::BufWriter::new(file), &trainer.log).map_err(|e| io_err(&metrics, e))?;
    result?;
    if let Some(last) = trainer.log.last() {
        eprintln!("trained {} steps, final batch loss {:.4}", trainer.step, last.total);
    }
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<(Model<Tensor<f32>>, ModelConfig), CliError> {
    let (model, meta) = checkpoint::load(path)?;
    Ok((model, meta.config))
}

/// Posterior means `[N, z]` of the listed images.
fn posterior_means(model: &Model<Tensor<f32>>, ds: &Dataset, indices: &[usize]) -> Result<Tensor<f32>, CliError> {
    let mut tape = Tape::<f32>::new();
    let m = bind_constant(&mut tape, model);
    let x = tape.constant(ds.gather(indices));
    let (mu, _) = encode(&mut tape, &m.encoder, x)?;
    Ok(tape.value(mu).clone())
}

/// Generates one tree per row of `z` (`[B, z]`).
fn decode(model: &Model<Tensor<f32>>, cfg: &ModelConfig, z: Tensor<f32>) -> Result<Vec<ParseTree<Tensor<f32>>>, CliError> {
    let b = z.shape()[0];
    let mut tape = Tape::<f32>::new();
    let m = bind_constant(&mut tape, model);
    let z = tape.constant(z);
    let tree = generate(&mut tape, &m.hyper, z, cfg)?;
    Ok((0..b).map(|i| tree.sample(&tape, i)).collect())
}

fn values(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn action_of(t: &Tensor<f32>) -> AffineAction {
    AffineAction::from_slice(&values(t))
}

/// Warps one placed patch (`[p, p]`) onto a `canvas`-sized frame.
fn place(patch: &Tensor<f32>, action: AffineAction, canvas: usize) -> Result<Vec<f64>, CliError> {
    let mut tape = Tape::<f64>::new();
    let p = patch.shape()[0];
    let v = tape.constant(patch.cast::<f64>().reshape([1, p, p]).map_err(ModelError::from)?);
    let av = action_constants(&mut tape, &[action]).map_err(ModelError::from)?;
    let w = warp(&mut tape, v, &av, canvas).map_err(ModelError::from)?;
    Ok(tape.value(w).data().to_vec())
}

#[derive(Serialize)]
struct SubPartRecord {
    path: Vec<usize>,
    action: AffineAction,
    tile_row: usize,
    tile_col: usize,
}

#[derive(Serialize)]
struct PartRecord {
    path: Vec<usize>,
    color: &'static str,
    rgb: [u8; 3],
    action: AffineAction,
    file: String,
    subparts: Vec<SubPartRecord>,
}

#[derive(Serialize)]
struct ParseRecord {
    index: usize,
    label: u32,
    image_size: usize,
    patch_size: usize,
    steps: Vec<usize>,
    recon: f64,
    z: Vec<f64>,
    /// Completion order of every step, as paths from the root.
    order: Vec<Vec<usize>>,
    parts: Vec<PartRecord>,
}

fn parse(a: ParseArgs) -> Result<(), CliError> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let ds = a.data.load()?;
    check_size(&cfg, &ds)?;
    if cfg.steps.len() != 2 {
        return Err(CliError::Usage("parse output is defined for two-level models".into()));
    }
    if let Some(&bad) = a.index.iter().find(|&&i| i >= ds.len()) {
        return Err(CliError::Usage(format!("index {bad} out of range for {} images", ds.len())));
    }
    let zoom = a.zoom.max(1);
    let (s, p) = (cfg.image_size(), cfg.patch_size());
    let mut tape = Tape::<f32>::new();
    let m = bind_constant(&mut tape, &model);
    let x = tape.constant(ds.gather(&a.index));
    let f = forward(&mut tape, &m, x, None, &cfg)?;
    let recon = tape.value(f.terms.recon).data().to_vec();

    for (row, &index) in a.index.iter().enumerate() {
        let tree = f.tree.sample(&tape, row);
        let dir = a.out.join(format!("image_{index:05}"));
        create_dir(&dir)?;
        image::write_gray(&dir.join("input.png"), &ds.image(index).iter().map(|&v| v as f64).collect::<Vec<_>>(), s, zoom)?;
        image::write_gray(&dir.join("canvas.png"), &values(tree.image()), s, zoom)?;

        let root = &tree.root;
        let mut layers = Vec::with_capacity(root.steps());
        let mut parts = Vec::with_capacity(root.steps());
        let mut tiles = vec![];
        for t in 0..root.steps() {
            let action = action_of(&root.actions[t]);
            let layer = place(&root.placed[t], action, s)?;
            let file = format!("part_{t}.png");
            image::write_rgb(&dir.join(&file), &image::overlay(&layer_alone(&layer, t), s), s, zoom)?;
            layers.push(layer);
            let child = &root.children[t];
            let subparts = (0..child.steps())
                .map(|u| {
                    tiles.push(values(&child.patches[u]));
                    SubPartRecord { path: vec![t, u], action: action_of(&child.actions[u]), tile_row: t, tile_col: u }
                })
                .collect();
            parts.push(PartRecord { path: vec![t], color: color_name(t), rgb: color(t), action, file, subparts });
        }
        image::write_rgb(&dir.join("parts.png"), &image::overlay(&layers, s), s, zoom)?;
        image::write_grid(&dir.join("subparts.png"), &tiles, p, cfg.steps[0], cfg.steps[1], zoom)?;
        let record = ParseRecord {
            index,
            label: ds.labels[index],
            image_size: s,
            patch_size: p,
            steps: cfg.steps.clone(),
            recon: recon[row] as f64,
            z: values(&tree.z),
            order: tree.order.clone(),
            parts,
        };
        let json = serde_json::to_string_pretty(&record).expect("parse record serializes");
        write_text(&dir.join("parse.json"), &json)?;
    }
    Ok(())
}

/// `t` empty layers followed by `layer`, so the overlay uses colour `t`.
fn layer_alone(layer: &[f64], t: usize) -> Vec<Vec<f64>> {
    let mut v = vec![vec![f64::NEG_INFINITY; layer.len()]; t];
    v.push(layer.to_vec());
    v
}

fn sample(a: SampleArgs) -> Result<(), CliError> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    if a.n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    create_dir(&a.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let z: Vec<f32> = (0..a.n * cfg.z_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let trees = decode(&model, &cfg, Tensor::new([a.n, cfg.z_dim], z).expect("prior shape"))?;
    let s = cfg.image_size();
    for (k, tree) in trees.iter().enumerate() {
        image::write_gray(&a.out.join(format!("sample_{k:03}.png")), &values(tree.image()), s, a.zoom.max(1))?;
    }
    Ok(())
}

/// Resolves `--from`/`--to`: a dataset index, or `class:C` for the mean
/// posterior program of class `C`.
fn endpoint(spec: &str, model: &Model<Tensor<f32>>, ds: &Dataset) -> Result<Vec<f64>, CliError> {
    let indices = match spec.strip_prefix("class:") {
        Some(c) => {
            let c: u32 = c.parse().map_err(|_| CliError::Usage(format!("bad class in {spec:?}")))?;
            let idx = ds.indices_where(|l| l == c);
            if idx.is_empty() {
                return Err(CliError::Usage(format!("no images of class {c}")));
            }
            idx
        }
        None => {
            let i: usize = spec.parse().map_err(|_| CliError::Usage(format!("expected an index or class:C, got {spec:?}")))?;
            if i >= ds.len() {
                return Err(CliError::Usage(format!("index {i} out of range for {} images", ds.len())));
            }
            vec![i]
        }
    };
    let mu = posterior_means(model, ds, &indices)?;
    let z = mu.shape()[1];
    let mut mean = vec![0.0; z];
    for row in mu.data().chunks(z) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v as f64);
    }
    Ok(mean.into_iter().map(|v| v / indices.len() as f64).collect())
}

/// `K` points `(1−α)·a + α·b` with `α = k/(K−1)`.
pub fn lerp_path(a: &[f64], b: &[f64], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let alpha = i as f64 / (k - 1) as f64;
            a.iter().zip(b).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect()
        })
        .collect()
}

fn interpolate(a: InterpolateArgs) -> Result<(), CliError> {
    if a.steps < 2 {
        return Err(CliError::Usage("--steps must be at least 2".into()));
    }
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let ds = a.data.load()?;
    check_size(&cfg, &ds)?;
    let za = endpoint(&a.from, &model, &ds)?;
    let zb = endpoint(&a.to, &model, &ds)?;
    let path = lerp_path(&za, &zb, a.steps);
    let flat: Vec<f32> = path.iter().flatten().map(|&v| v as f32).collect();
    let trees = decode(&model, &cfg, Tensor::new([a.steps, cfg.z_dim], flat).expect("path shape"))?;
    create_dir(&a.out)?;
    let s = cfg.image_size();
    let zoom = a.zoom.max(1);
    let mut canvases = vec![];
    for (k, tree) in trees.iter().enumerate() {
        let v = values(tree.image());
        image::write_gray(&a.out.join(format!("interp_{k:03}.png")), &v, s, zoom)?;
        canvases.push(v);
    }
    image::write_grid(&a.out.join("strip.png"), &canvases, s, 1, a.steps, zoom)
}

fn hyper_bytes(model: &Model<Tensor<f32>>) -> Vec<u8> {
    model.hyper.params().iter().flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes())).collect()
}

fn transfer(a: TransferArgs) -> Result<(), CliError> {
    let ds = a.data.load()?;
    let cfg = a.model.config()?;
    check_size(&cfg, &ds)?;
    let base = ds.subset(&ds.indices_where(|l| l != a.holdout));
    let held = ds.subset(&ds.indices_where(|l| l == a.holdout));
    if base.is_empty() || held.is_empty() {
        return Err(CliError::Usage(format!("class {} must be present but not alone", a.holdout)));
    }
    create_dir(&a.out)?;
    let opts = a.optim.options(cfg.seed, Trainable::All)?;
    let mut trainer = Trainer::new(Model::init(&cfg)?, cfg.clone(), opts.clone());
    trainer.run(&base, a.optim.step_count(base.len()))?;
    let meta = CheckpointMeta { config: cfg.clone(), dataset: format!("{} without class {}", ds.name, a.holdout) };
    checkpoint::save(a.out.join("base.rnp"), &trainer.model, &meta)?;
    let before = evaluate(&trainer.model, &cfg, &held)?;
    let hyper_before = crc32fast::hash(&hyper_bytes(&trainer.model));

    let fine = TrainOptions { lr: a.transfer_lr, trainable: Trainable::EncoderOnly, ..opts };
    let mut tuner = Trainer::new(trainer.model, cfg.clone(), fine);
    tuner.run(&held, a.transfer_steps)?;
    let after = evaluate(&tuner.model, &cfg, &held)?;
    let hyper_after = crc32fast::hash(&hyper_bytes(&tuner.model));
    let meta = CheckpointMeta { config: cfg, dataset: format!("{} class {} encoder-only", ds.name, a.holdout) };
    checkpoint::save(a.out.join("transfer.rnp"), &tuner.model, &meta)?;

    let mut report = String::from("stage,recon,part_reg,kl,total,hypernet_crc32\n");
    for (stage, e, h) in [("before", before, hyper_before), ("after", after, hyper_after)] {
        let _ = writeln!(report, "{stage},{},{},{},{},{h:08x}", e.recon, e.part_reg, e.kl, e.total);
    }
    write_text(&a.out.join("transfer.csv"), &report)?;
    eprintln!(
        "held-out class {}: loss {:.4} -> {:.4}, hypernetwork {}",
        a.holdout,
        before.total,
        after.total,
        if hyper_before == hyper_after { "unchanged" } else { "CHANGED" }
    );
    Ok(())
}

fn export_latents(a: ExportArgs) -> Result<(), CliError> {
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let ds = a.data.load()?;
    check_size(&cfg, &ds)?;
    let z = cfg.z_dim;
    let mut csv = String::from("index,label,level,step");
    for k in 0..z {
        let _ = write!(csv, ",z{k}");
    }
    csv.push('\n');
    let all: Vec<usize> = (0..ds.len()).collect();
    for chunk in all.chunks(64) {
        let mu = posterior_means(&model, &ds, chunk)?;
        let trees = decode(&model, &cfg, mu.clone())?;
        for (row, (&i, tree)) in chunk.iter().zip(&trees).enumerate() {
            let top = cfg.steps.len();
            let mut line = |level: usize, step: String, v: &[f32]| {
                let _ = write!(csv, "{i},{},{level},{step}", ds.labels[i]);
                v.iter().for_each(|x| {
                    let _ = write!(csv, ",{x}");
                });
                csv.push('\n');
            };
            line(top, String::new(), &mu.data()[row * z..(row + 1) * z]);
            for (t, s) in tree.root.states.iter().enumerate() {
                line(top - 1, t.to_string(), s.data());
            }
        }
    }
    write_text(&a.out, &csv)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<(), CliError> {
    let results = gradcheck::run_all(a.coords.max(1), a.seed);
    let mut failed = 0;
    for r in &results {
        let err = r.error.map_or_else(|| format!("error ({})", r.detail), |e| format!("{e:.3e}"));
        println!("{} {} {err} < {:.0e}", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.tolerance);
        failed += usize::from(!r.passed());
    }
    if failed > 0 {
        return Err(CliError::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
    }
    println!("all {} gradient checks passed", results.len());
    Ok(())
}
