//! Differentiable affine spatial transformer.
//!
//! An action is a 6-vector `(sx, sy, tx, ty, θ, m)`. The network emits it
//! unbounded; [`squash_action`] maps it into the level's bounds. The linear
//! part is `R(θ)·Sh(m)·diag(sx, sy)` with `Sh(m) = [[1, m], [0, 1]]` and the
//! translation is `(tx, ty)`. The resulting matrix maps patch-normalized
//! coordinates to canvas-normalized coordinates.
//!
//! Normalized coordinates span `[-1, 1]` with pixel `i` of `N` centred at
//! `(2i+1)/N − 1`. Sampling outside a source reads zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tape::{Tape, TapeError, Var};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StnError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("singular affine action: scale ({sx}, {sy})")]
    Singular { sx: f64, sy: f64 },
    #[error("invalid level geometry: {0}")]
    Geometry(String),
    #[error("action {0:?} lies outside the level bounds")]
    OutOfBounds(AffineAction),
}

/// Placement bounds for one tree level.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelGeometry {
    pub canvas_size: usize,
    pub patch_size: usize,
    pub scale_min: f64,
    pub scale_max: f64,
    pub theta_max: f64,
    pub shear_max: f64,
}

impl LevelGeometry {
    /// Parts on a 28-pixel image: 6 to 12 pixels wide.
    pub fn top() -> Self {
        LevelGeometry {
            canvas_size: 28,
            patch_size: 12,
            scale_min: 6.0 / 28.0,
            scale_max: 12.0 / 28.0,
            theta_max: std::f64::consts::FRAC_PI_4,
            shear_max: 0.5,
        }
    }

    /// Sub-parts inside a 12-pixel part frame: 1.5 to 4 pixels wide.
    pub fn sub() -> Self {
        LevelGeometry {
            canvas_size: 12,
            patch_size: 12,
            scale_min: 1.5 / 12.0,
            scale_max: 4.0 / 12.0,
            theta_max: std::f64::consts::FRAC_PI_4,
            shear_max: 0.5,
        }
    }

    pub fn validate(&self) -> Result<(), StnError> {
        let fail = |msg: &str| Err(StnError::Geometry(format!("{msg}: {self:?}")));
        if self.patch_size == 0 || self.patch_size > self.canvas_size {
            return fail("need 0 < patch_size <= canvas_size");
        }
        if !(self.scale_min > 0.0 && self.scale_min < self.scale_max && self.scale_max <= 1.0) {
            return fail("need 0 < scale_min < scale_max <= 1");
        }
        if !(self.theta_max >= 0.0 && self.shear_max >= 0.0) {
            return fail("rotation and shear bounds must be non-negative");
        }
        Ok(())
    }
}

/// Squashed affine action.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineAction {
    pub sx: f64,
    pub sy: f64,
    pub tx: f64,
    pub ty: f64,
    pub theta: f64,
    pub shear: f64,
}

impl AffineAction {
    pub fn identity() -> Self {
        AffineAction { sx: 1.0, sy: 1.0, tx: 0.0, ty: 0.0, theta: 0.0, shear: 0.0 }
    }

    /// Uniform scale `s` centred at `(tx, ty)`.
    pub fn place(s: f64, tx: f64, ty: f64) -> Self {
        AffineAction { sx: s, sy: s, tx, ty, theta: 0.0, shear: 0.0 }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.sx, self.sy, self.tx, self.ty, self.theta, self.shear]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        AffineAction { sx: v[0], sy: v[1], tx: v[2], ty: v[3], theta: v[4], shear: v[5] }
    }

    /// `[[M, t]]` with `M = R(θ)·Sh(m)·diag(sx, sy)`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        let (s, c) = self.theta.sin_cos();
        let m = self.shear;
        [
            [c * self.sx, (c * m - s) * self.sy, self.tx],
            [s * self.sx, (s * m + c) * self.sy, self.ty],
        ]
    }

    pub fn within(&self, geom: &LevelGeometry) -> bool {
        let tol = 1e-12;
        let scale_ok = |s: f64| s >= geom.scale_min - tol && s <= geom.scale_max + tol;
        scale_ok(self.sx)
            && scale_ok(self.sy)
            && self.tx.abs() <= 1.0
            && self.ty.abs() <= 1.0
            && self.theta.abs() <= geom.theta_max + tol
            && self.shear.abs() <= geom.shear_max + tol
    }
}

/// Per-sample action components on a tape, each `[B,1]`.
#[derive(Clone, Copy, Debug)]
pub struct ActionVars {
    pub sx: Var,
    pub sy: Var,
    pub tx: Var,
    pub ty: Var,
    pub theta: Var,
    pub shear: Var,
    /// All six components packed as `[B,6]`.
    pub packed: Var,
}

impl ActionVars {
    pub fn batch<T: Real>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.packed)[0]
    }

    pub fn values<T: Real>(&self, tape: &Tape<T>) -> Vec<AffineAction> {
        tape.value(self.packed)
            .data()
            .chunks(6)
            .map(|row| AffineAction::from_slice(&row.iter().map(|v| v.as_f64()).collect::<Vec<_>>()))
            .collect()
    }
}

/// Maps raw network output `[B,6]` into the level's bounds:
/// `s = s_min + (s_max − s_min)·σ(r)`, `t = tanh(r)`,
/// `θ = θ_max·tanh(r)`, `m = m_max·tanh(r)`.
pub fn squash_action<T: Real>(tape: &mut Tape<T>, raw: Var, geom: &LevelGeometry) -> Result<ActionVars, StnError> {
    let shape = tape.shape(raw).to_vec();
    if shape.len() != 2 || shape[1] != 6 {
        return Err(TapeError::Shape { op: "squash_action", shapes: vec![shape] }.into());
    }
    let mut col = |k: usize| tape.slice(raw, k, 1);
    let (r0, r1, r2, r3, r4, r5) = (col(0)?, col(1)?, col(2)?, col(3)?, col(4)?, col(5)?);
    let mut scale = |r: Var| {
        let s = tape.sigmoid(r);
        let s = tape.scale(s, geom.scale_max - geom.scale_min);
        tape.add_scalar(s, geom.scale_min)
    };
    let sx = scale(r0);
    let sy = scale(r1);
    let tx = tape.tanh(r2);
    let ty = tape.tanh(r3);
    let theta = tape.tanh(r4);
    let theta = tape.scale(theta, geom.theta_max);
    let shear = tape.tanh(r5);
    let shear = tape.scale(shear, geom.shear_max);
    let packed = tape.concat(&[sx, sy, tx, ty, theta, shear])?;
    Ok(ActionVars { sx, sy, tx, ty, theta, shear, packed })
}

/// Records already-squashed actions as tape constants.
pub fn action_constants<T: Real>(tape: &mut Tape<T>, actions: &[AffineAction]) -> Result<ActionVars, StnError> {
    let b = actions.len();
    let flat: Vec<f64> = actions.iter().flat_map(|a| a.to_array()).collect();
    let packed = tape.constant(Tensor::from_f64([b, 6], &flat)?);
    let mut col = |k: usize| tape.slice(packed, k, 1);
    Ok(ActionVars { sx: col(0)?, sy: col(1)?, tx: col(2)?, ty: col(3)?, theta: col(4)?, shear: col(5)?, packed })
}

/// `[3, n·n]` rows `(u, v, 1)` over the pixel centres of an `n×n` grid.
fn basis<T: Real>(tape: &mut Tape<T>, n: usize) -> Var {
    let mut data = vec![0.0; 3 * n * n];
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            data[i] = (2 * c + 1) as f64 / n as f64 - 1.0;
            data[n * n + i] = (2 * r + 1) as f64 / n as f64 - 1.0;
            data[2 * n * n + i] = 1.0;
        }
    }
    tape.constant(Tensor::from_f64([3, n * n], &data).expect("basis shape"))
}

fn check_invertible<T: Real>(tape: &Tape<T>, a: &ActionVars) -> Result<(), StnError> {
    for (sx, sy) in tape.value(a.sx).data().iter().zip(tape.value(a.sy).data()) {
        let (sx, sy) = (sx.as_f64(), sy.as_f64());
        if !(sx > 0.0 && sy > 0.0) {
            return Err(StnError::Singular { sx, sy });
        }
    }
    Ok(())
}

fn check_square<T: Real>(tape: &Tape<T>, v: Var, batch: usize, op: &'static str) -> Result<usize, StnError> {
    match *tape.shape(v) {
        [b, h, w] if b == batch && h == w => Ok(h),
        _ => Err(TapeError::Shape { op, shapes: vec![tape.shape(v).to_vec(), vec![batch]] }.into()),
    }
}

/// Places `patch` (`[B,P,P]`) on a `canvas×canvas` grid: every canvas pixel
/// is pulled back through the inverse affine map and sampled bilinearly.
pub fn warp<T: Real>(tape: &mut Tape<T>, patch: Var, a: &ActionVars, canvas: usize) -> Result<Var, StnError> {
    let batch = a.batch(tape);
    check_square(tape, patch, batch, "warp")?;
    check_invertible(tape, a)?;
    // M⁻¹ = diag(1/sx, 1/sy)·Sh(−m)·R(−θ)
    let c = tape.cos(a.theta);
    let s = tape.sin(a.theta);
    let isx = tape.recip(a.sx);
    let isy = tape.recip(a.sy);
    let ms = tape.mul(a.shear, s)?;
    let mc = tape.mul(a.shear, c)?;
    let c_ms = tape.add(c, ms)?;
    let s_mc = tape.sub(s, mc)?;
    let i11 = tape.mul(c_ms, isx)?;
    let i12 = tape.mul(s_mc, isx)?;
    let neg_s = tape.scale(s, -1.0);
    let i21 = tape.mul(neg_s, isy)?;
    let i22 = tape.mul(c, isy)?;
    let off = |tape: &mut Tape<T>, p: Var, q: Var| -> Result<Var, StnError> {
        let ptx = tape.mul(p, a.tx)?;
        let qty = tape.mul(q, a.ty)?;
        let sum = tape.add(ptx, qty)?;
        Ok(tape.scale(sum, -1.0))
    };
    let off_x = off(tape, i11, i12)?;
    let off_y = off(tape, i21, i22)?;
    sample_affine(tape, patch, [i11, i12, off_x], [i21, i22, off_y], canvas)
}

/// Zooms into `image` (`[B,C,C]`): every patch pixel is pushed forward
/// through the affine map and the image is sampled there. Inverse of
/// [`warp`]'s placement.
pub fn extract_patch<T: Real>(tape: &mut Tape<T>, image: Var, a: &ActionVars, patch: usize) -> Result<Var, StnError> {
    let batch = a.batch(tape);
    check_square(tape, image, batch, "extract_patch")?;
    check_invertible(tape, a)?;
    let c = tape.cos(a.theta);
    let s = tape.sin(a.theta);
    let m11 = tape.mul(c, a.sx)?;
    let m21 = tape.mul(s, a.sx)?;
    let cm = tape.mul(c, a.shear)?;
    let sm = tape.mul(s, a.shear)?;
    let cm_s = tape.sub(cm, s)?;
    let sm_c = tape.add(sm, c)?;
    let m12 = tape.mul(cm_s, a.sy)?;
    let m22 = tape.mul(sm_c, a.sy)?;
    sample_affine(tape, image, [m11, m12, a.tx], [m21, m22, a.ty], patch)
}

fn sample_affine<T: Real>(
    tape: &mut Tape<T>,
    source: Var,
    row_x: [Var; 3],
    row_y: [Var; 3],
    out: usize,
) -> Result<Var, StnError> {
    let grid = basis(tape, out);
    let cx = tape.concat(&row_x)?;
    let cy = tape.concat(&row_y)?;
    let xs = tape.matmul(cx, grid)?;
    let ys = tape.matmul(cy, grid)?;
    Ok(tape.bilinear_sample(source, xs, ys, out, out)?)
}
