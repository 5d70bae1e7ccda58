//! Procedural stroke corpus with known parses.
//!
//! Each class is a fixed list of stroke primitives placed by affine actions
//! on the image canvas. Samples jitter every placement's translation by up
//! to ±0.1 and are rendered with the same warp the model uses, so the
//! ground-truth parse is exact.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset};
use crate::stn::{action_constants, warp, AffineAction, LevelGeometry};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Stroke shapes in patch-normalized coordinates (`[-1,1]²`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Primitive {
    Line { x0: f64, y0: f64, x1: f64, y1: f64 },
    /// Circular arc, angles in radians measured from +x towards +y (down).
    Arc { cx: f64, cy: f64, r: f64, start: f64, end: f64 },
}

/// Stroke half-width in patch pixels; intensity falls off linearly over
/// one more pixel.
const HALF_WIDTH: f64 = 0.9;

impl Primitive {
    fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Primitive::Line { x0, y0, x1, y1 } => {
                let (dx, dy) = (x1 - x0, y1 - y0);
                let t = (((x - x0) * dx + (y - y0) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
                (x - x0 - t * dx).hypot(y - y0 - t * dy)
            }
            Primitive::Arc { cx, cy, r, start, end } => {
                let ang = (y - cy).atan2(x - cx);
                let within = |a: f64| {
                    let span = (end - start).rem_euclid(std::f64::consts::TAU);
                    (a - start).rem_euclid(std::f64::consts::TAU) <= span || end - start >= std::f64::consts::TAU
                };
                if within(ang) {
                    ((x - cx).hypot(y - cy) - r).abs()
                } else {
                    let p0 = (cx + r * start.cos(), cy + r * start.sin());
                    let p1 = (cx + r * end.cos(), cy + r * end.sin());
                    (x - p0.0).hypot(y - p0.1).min((x - p1.0).hypot(y - p1.1))
                }
            }
        }
    }

    /// Anti-aliased `size×size` raster, values in `[0,1]`.
    pub fn rasterize(&self, size: usize) -> Vec<f64> {
        let px = 2.0 / size as f64;
        let mut out = vec![0.0; size * size];
        for r in 0..size {
            for c in 0..size {
                let x = (2 * c + 1) as f64 / size as f64 - 1.0;
                let y = (2 * r + 1) as f64 / size as f64 - 1.0;
                let d = self.distance(x, y) / px;
                out[r * size + c] = (1.0 + HALF_WIDTH - d).clamp(0.0, 1.0);
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub primitive: usize,
    pub action: AffineAction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub primitives: Vec<Primitive>,
    /// Per class, its parts in drawing order.
    pub classes: Vec<Vec<Placement>>,
    pub count: usize,
    pub seed: u64,
    pub jitter: f64,
    pub geometry: LevelGeometry,
}

pub const H_LINE: usize = 0;
pub const V_LINE: usize = 1;
pub const DIAGONAL: usize = 2;
pub const RING: usize = 3;
pub const CUP: usize = 4;

impl SynthSpec {
    /// Three classes on the default 28-pixel geometry, assigned round-robin:
    /// 0 a four-sided box, 1 a tee, 2 a slashed ring.
    pub fn standard(count: usize, seed: u64) -> Self {
        let primitives = vec![
            Primitive::Line { x0: -0.85, y0: 0.0, x1: 0.85, y1: 0.0 },
            Primitive::Line { x0: 0.0, y0: -0.85, x1: 0.0, y1: 0.85 },
            Primitive::Line { x0: -0.7, y0: -0.7, x1: 0.7, y1: 0.7 },
            Primitive::Arc { cx: 0.0, cy: 0.0, r: 0.7, start: 0.0, end: std::f64::consts::TAU },
            Primitive::Arc { cx: 0.0, cy: -0.2, r: 0.7, start: 0.0, end: std::f64::consts::PI },
        ];
        let at = |primitive, s, tx, ty| Placement { primitive, action: AffineAction::place(s, tx, ty) };
        let classes = vec![
            vec![at(H_LINE, 0.4, 0.0, -0.4), at(V_LINE, 0.4, 0.4, 0.0), at(H_LINE, 0.4, 0.0, 0.4), at(V_LINE, 0.4, -0.4, 0.0)],
            vec![at(H_LINE, 0.42, 0.0, -0.35), at(V_LINE, 0.42, 0.0, 0.15)],
            vec![at(RING, 0.42, 0.0, 0.0), at(DIAGONAL, 0.3, 0.0, 0.0)],
        ];
        SynthSpec { primitives, classes, count, seed, jitter: 0.1, geometry: LevelGeometry::top() }
    }

    /// The standard spec with an extra `cup` class (index 3).
    pub fn with_cup(mut self) -> Self {
        let cup = Placement { primitive: CUP, action: AffineAction::place(0.42, 0.0, 0.1) };
        let bar = Placement { primitive: H_LINE, action: AffineAction::place(0.3, 0.0, -0.45) };
        self.classes.push(vec![cup, bar]);
        self
    }

    pub fn validate(&self) -> Result<(), DataError> {
        self.geometry.validate().map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        if self.classes.is_empty() || self.classes.iter().any(|c| c.is_empty()) {
            return Err(DataError::InvalidSpec("every class needs at least one part".into()));
        }
        for part in self.classes.iter().flatten() {
            if part.primitive >= self.primitives.len() {
                return Err(DataError::InvalidSpec(format!("unknown primitive {}", part.primitive)));
            }
            let a = part.action;
            let worst = [
                AffineAction { tx: a.tx.abs() + self.jitter, ty: a.ty.abs() + self.jitter, ..a },
                a,
            ];
            if worst.iter().any(|w| !w.within(&self.geometry)) {
                return Err(DataError::OutOfBounds(a));
            }
        }
        Ok(())
    }
}

/// Renders `clamp(Σ warp(primitive, action), 0, 1)` for the corpus. Classes
/// are assigned round-robin; labels are class indices.
pub fn synth_strokes(spec: &SynthSpec) -> Result<(Dataset, Vec<Vec<Placement>>), DataError> {
    spec.validate()?;
    if spec.count == 0 {
        return Err(DataError::InvalidSpec("count must be positive".into()));
    }
    let g = &spec.geometry;
    let p = g.patch_size;
    let rasters: Vec<Vec<f64>> = spec.primitives.iter().map(|pr| pr.rasterize(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut truth = Vec::with_capacity(spec.count);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let class = i % spec.classes.len();
        let parts: Vec<Placement> = spec.classes[class]
            .iter()
            .map(|part| {
                let mut a = part.action;
                a.tx += rng.random_range(-spec.jitter..=spec.jitter);
                a.ty += rng.random_range(-spec.jitter..=spec.jitter);
                Placement { primitive: part.primitive, action: a }
            })
            .collect();
        truth.push(parts);
        labels.push(class as u32);
    }

    let c = g.canvas_size;
    let mut images = vec![0f32; spec.count * c * c];
    for (i, parts) in truth.iter().enumerate() {
        let img = render(&rasters, parts, p, c)?;
        for (d, v) in images[i * c * c..(i + 1) * c * c].iter_mut().zip(img) {
            *d = v.clamp(0.0, 1.0) as f32;
        }
    }
    let ds = Dataset::new("synth".into(), Tensor::new([spec.count, c, c], images).expect("synth shape"), labels)?;
    Ok((ds, truth))
}

/// Unclamped sum of the warped primitives.
pub fn render(rasters: &[Vec<f64>], parts: &[Placement], patch: usize, canvas: usize) -> Result<Vec<f64>, DataError> {
    let mut tape = Tape::<f64>::new();
    let n = parts.len();
    let mut stacked = Vec::with_capacity(n * patch * patch);
    for part in parts {
        stacked.extend_from_slice(&rasters[part.primitive]);
    }
    let patches = tape.constant(Tensor::new([n, patch, patch], stacked).expect("raster shape"));
    let actions: Vec<AffineAction> = parts.iter().map(|p| p.action).collect();
    let av = action_constants(&mut tape, &actions).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let warped = warp(&mut tape, patches, &av, canvas).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let w = tape.value(warped).data();
    let mut out = vec![0.0; canvas * canvas];
    for k in 0..n {
        for (o, v) in out.iter_mut().zip(&w[k * canvas * canvas..(k + 1) * canvas * canvas]) {
            *o += v;
        }
    }
    Ok(out)
}
