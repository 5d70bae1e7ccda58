//! The 64-bit gradient-check suite behind `rnp gradcheck` and the
//! acceptance tests: every tape primitive, the two warps, and the full
//! objective on the tiny configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{forward, Model, ModelConfig, ModelError};
use crate::stn::{extract_patch, squash_action, warp, LevelGeometry};
use crate::tape::{grad_check, grad_check_coords, Tape, TapeError, Var};
use crate::tensor::Tensor;

pub const PRIMITIVE_TOLERANCE: f64 = 1e-6;
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    /// Worst relative error, or `None` when evaluation itself failed.
    pub error: Option<f64>,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.error.is_some_and(|e| e < self.tolerance)
    }

    fn from<E: std::fmt::Display>(name: impl Into<String>, r: Result<f64, E>, tolerance: f64) -> Self {
        match r {
            Ok(e) => CheckResult { name: name.into(), error: Some(e), tolerance, detail: String::new() },
            Err(e) => CheckResult { name: name.into(), error: None, tolerance, detail: e.to_string() },
        }
    }
}

fn random(shape: &[usize], seed: u64, range: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-range..range)).collect::<Vec<_>>()).expect("shape")
}

/// Weighted sum so every output coordinate matters.
fn weigh(tape: &mut Tape<f64>, y: Var) -> Result<Var, TapeError> {
    let w = tape.constant(random(tape.shape(y), 77, 1.5));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

type Probe = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var, TapeError>>;

/// Normalized coordinates at least 0.1 pixel away from any pixel centre
/// line, so finite differences never straddle a bilinear kink.
fn off_grid(n: usize, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let base = rng.random_range(-1..size as i64) as f64;
            let frac = rng.random_range(0.1..0.9);
            (2.0 * (base + frac) + 1.0) / size as f64 - 1.0
        })
        .collect()
}

/// One check per primitive (and per operand position where it matters).
pub fn primitive_checks() -> Vec<CheckResult> {
    let eps = 1e-4;
    let other = random(&[2, 3], 21, 1.5);
    let mut cases: Vec<(&str, Tensor<f64>, Probe)> = vec![];
    let o = other.clone();
    cases.push(("matmul/left", random(&[4, 2], 1, 1.5), Box::new(move |t, x| {
        let b = t.constant(o.clone());
        let y = t.matmul(x, b)?;
        weigh(t, y)
    })));
    let o = other.clone();
    cases.push(("matmul/right", random(&[3, 5], 2, 1.5), Box::new(move |t, x| {
        let a = t.constant(o.clone());
        let y = t.matmul(a, x)?;
        weigh(t, y)
    })));
    cases.push(("matmul/batched", random(&[2, 3, 4], 3, 1.5), Box::new(|t, x| {
        let b = t.constant(random(&[2, 4, 2], 4, 1.5));
        let y = t.matmul(x, b)?;
        weigh(t, y)
    })));
    cases.push(("matmul/shared", random(&[4, 2], 5, 1.5), Box::new(|t, x| {
        let a = t.constant(random(&[3, 2, 4], 6, 1.5));
        let y = t.matmul(a, x)?;
        weigh(t, y)
    })));
    let binary: [(&str, fn(&mut Tape<f64>, Var, Var) -> Result<Var, TapeError>); 3] =
        [("add", Tape::add), ("sub", Tape::sub), ("mul", Tape::mul)];
    for (name, op) in binary {
        cases.push((name, random(&[2, 3], 7, 1.5), Box::new(move |t, x| {
            let c = t.constant(random(&[2, 3], 8, 1.5));
            let y = op(t, x, c)?;
            let z = op(t, c, y)?;
            weigh(t, z)
        })));
    }
    cases.push(("broadcast_add/lhs", random(&[2, 3], 9, 1.5), Box::new(|t, x| {
        let c = t.constant(random(&[3], 10, 1.5));
        let y = t.broadcast_add(x, c)?;
        weigh(t, y)
    })));
    cases.push(("broadcast_add/rhs", random(&[3], 11, 1.5), Box::new(|t, x| {
        let c = t.constant(random(&[4, 3], 12, 1.5));
        let y = t.broadcast_add(c, x)?;
        weigh(t, y)
    })));
    cases.push(("scale", random(&[5], 13, 1.5), Box::new(|t, x| {
        let y = t.scale(x, -1.7);
        weigh(t, y)
    })));
    let unary: [(&str, fn(&mut Tape<f64>, Var) -> Var); 8] = [
        ("elu", Tape::elu),
        ("tanh", Tape::tanh),
        ("sigmoid", Tape::sigmoid),
        ("exp", Tape::exp),
        ("square", Tape::square),
        ("sin", Tape::sin),
        ("cos", Tape::cos),
        ("recip", Tape::recip),
    ];
    for (name, op) in unary {
        let mut x = random(&[6], 14, 1.5);
        if name == "recip" || name == "elu" {
            // away from the pole and from elu's second-order kink
            x.data_mut().iter_mut().for_each(|v| *v += v.signum() * 0.5);
        }
        cases.push((name, x, Box::new(move |t, x| {
            let y = op(t, x);
            weigh(t, y)
        })));
    }
    cases.push(("sum", random(&[2, 2], 15, 1.5), Box::new(|t, x| {
        let s = t.square(x);
        Ok(t.sum(s))
    })));
    cases.push(("mean", random(&[2, 2], 16, 1.5), Box::new(|t, x| {
        let s = t.square(x);
        Ok(t.mean(s))
    })));
    cases.push(("concat", random(&[2, 3], 17, 1.5), Box::new(|t, x| {
        let c = t.constant(random(&[2, 2], 18, 1.5));
        let y = t.concat(&[c, x, c, x])?;
        weigh(t, y)
    })));
    cases.push(("slice", random(&[3, 5], 19, 1.5), Box::new(|t, x| {
        let y = t.slice(x, 1, 3)?;
        weigh(t, y)
    })));
    cases.push(("reshape", random(&[2, 6], 20, 1.5), Box::new(|t, x| {
        let y = t.reshape(x, &[3, 4])?;
        weigh(t, y)
    })));
    cases.push(("patches", random(&[2, 5, 5, 2], 22, 1.5), Box::new(|t, x| {
        let y = t.patches(x, 3, 2, 1)?;
        weigh(t, y)
    })));
    let image = random(&[2, 4, 5], 30, 1.5);
    let xs = Tensor::from_f64([2, 6], &off_grid(12, 5, 31)).expect("shape");
    let ys = Tensor::from_f64([2, 6], &off_grid(12, 4, 32)).expect("shape");
    let (x1, y1) = (xs.clone(), ys.clone());
    cases.push(("bilinear_sample/image", image.clone(), Box::new(move |t, img| {
        let (x, y) = (t.constant(x1.clone()), t.constant(y1.clone()));
        let s = t.bilinear_sample(img, x, y, 2, 3)?;
        weigh(t, s)
    })));
    let (i2, y2) = (image.clone(), ys.clone());
    cases.push(("bilinear_sample/x", xs.clone(), Box::new(move |t, x| {
        let (img, y) = (t.constant(i2.clone()), t.constant(y2.clone()));
        let s = t.bilinear_sample(img, x, y, 2, 3)?;
        weigh(t, s)
    })));
    let (i3, x3) = (image, xs);
    cases.push(("bilinear_sample/y", ys, Box::new(move |t, y| {
        let (img, x) = (t.constant(i3.clone()), t.constant(x3.clone()));
        let s = t.bilinear_sample(img, x, y, 2, 3)?;
        weigh(t, s)
    })));

    cases
        .into_iter()
        .map(|(name, x, f)| CheckResult::from(format!("primitive/{name}"), grad_check(|t: &mut Tape<f64>, v| f(t, v), &x, eps), PRIMITIVE_TOLERANCE))
        .collect()
}

/// Raw actions drawn well inside the squash range.
fn raw_actions(batch: usize, seed: u64) -> Tensor<f64> {
    random(&[batch, 6], seed, 0.8)
}

/// `warp` and `extract_patch` with respect to the source and the raw
/// action, on a 10-pixel canvas with 6-pixel patches.
pub fn stn_checks() -> Vec<CheckResult> {
    let eps = 1e-6;
    let geom = LevelGeometry { canvas_size: 10, patch_size: 6, scale_min: 0.3, scale_max: 0.7, ..LevelGeometry::top() };
    let patch = random(&[2, 6, 6], 41, 1.0);
    let image = random(&[2, 10, 10], 42, 1.0);
    let raw = raw_actions(2, 43);
    let loss = |t: &mut Tape<f64>, y: Var| weigh(t, y).map_err(crate::stn::StnError::from);
    let mut out = vec![];

    let r = raw.clone();
    out.push(CheckResult::from(
        "warp/patch",
        grad_check(
            |t: &mut Tape<f64>, p| {
                let rv = t.constant(r.clone());
                let a = squash_action(t, rv, &geom)?;
                let y = warp(t, p, &a, geom.canvas_size)?;
                loss(t, y)
            },
            &patch,
            eps,
        ),
        COMPOSITE_TOLERANCE,
    ));
    out.push(CheckResult::from(
        "warp/action",
        grad_check(
            |t: &mut Tape<f64>, rv| {
                let p = t.constant(patch.clone());
                let a = squash_action(t, rv, &geom)?;
                let y = warp(t, p, &a, geom.canvas_size)?;
                loss(t, y)
            },
            &raw,
            eps,
        ),
        COMPOSITE_TOLERANCE,
    ));
    let r = raw.clone();
    out.push(CheckResult::from(
        "extract_patch/image",
        grad_check(
            |t: &mut Tape<f64>, img| {
                let rv = t.constant(r.clone());
                let a = squash_action(t, rv, &geom)?;
                let y = extract_patch(t, img, &a, geom.patch_size)?;
                loss(t, y)
            },
            &image,
            eps,
        ),
        COMPOSITE_TOLERANCE,
    ));
    out.push(CheckResult::from(
        "extract_patch/action",
        grad_check(
            |t: &mut Tape<f64>, rv| {
                let img = t.constant(image.clone());
                let a = squash_action(t, rv, &geom)?;
                let y = extract_patch(t, img, &a, geom.patch_size)?;
                loss(t, y)
            },
            &raw,
            eps,
        ),
        COMPOSITE_TOLERANCE,
    ));
    out
}

/// Model used for the full-objective check: the tiny configuration with
/// hypernetwork heads enlarged so the generated networks are far from
/// zero and every path carries a measurable gradient.
pub fn tiny_check_model(seed: u64) -> (ModelConfig, Model<Tensor<f64>>) {
    let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
    let mut model = Model::<Tensor<f64>>::init(&cfg).expect("tiny config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for h in &mut model.hyper.heads {
        h.weight.data_mut().iter_mut().for_each(|v| *v *= 30.0);
        h.bias.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
    }
    (cfg, model)
}

/// Total loss at the tiny configuration against central differences
/// (ε = 1e-4) for every trainable tensor, at `coords_per_tensor` random
/// coordinates of each.
pub fn model_checks(coords_per_tensor: usize, seed: u64) -> Vec<CheckResult> {
    let eps = 1e-4;
    let (cfg, model) = tiny_check_model(seed);
    let s = cfg.image_size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1111);
    let x = Tensor::from_f64([2, s, s], &(0..2 * s * s).map(|_| rng.random::<f64>()).collect::<Vec<_>>()).expect("shape");
    let noise = random(&[2, cfg.z_dim], seed ^ 0x2222, 1.0);
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();

    let mut out = vec![];
    for (k, name) in names.iter().enumerate() {
        let target = model.params()[k].1.clone();
        let coords: Vec<usize> = (0..coords_per_tensor.min(target.len())).map(|_| rng.random_range(0..target.len())).collect();
        let r = grad_check_coords(
            |t: &mut Tape<f64>, v: Var| -> Result<Var, ModelError> {
                let mut m = model.map(&mut |w| t.constant(w.clone()));
                *m.params_mut()[k].1 = v;
                let xv = t.constant(x.clone());
                Ok(forward(t, &m, xv, Some(noise.clone()), &cfg)?.total)
            },
            &target,
            eps,
            &coords,
        );
        out.push(CheckResult::from(format!("total_loss/{name}"), r, COMPOSITE_TOLERANCE));
    }
    out
}

/// Everything, in suite order.
pub fn run_all(coords_per_tensor: usize, seed: u64) -> Vec<CheckResult> {
    let mut all = primitive_checks();
    all.extend(stn_checks());
    all.extend(model_checks(coords_per_tensor, seed));
    all
}
