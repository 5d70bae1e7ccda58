//! Dense loops behind the tape primitives.
//!
//! Everything here is single-threaded with a fixed accumulation order, so
//! results are bitwise reproducible for a given input.

use crate::tensor::Real;

const COL_TILE: usize = 256;

/// Dot product with eight interleaved accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let cx = x.chunks_exact(8);
    let cy = y.chunks_exact(8);
    let (rx, ry) = (cx.remainder(), cy.remainder());
    for (a, b) in cx.zip(cy) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (a, b) in rx.iter().zip(ry) {
        s += *a * *b;
    }
    s
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

/// `c[n,m] += a[n,k] · b[k,m]`
pub(crate) fn gemm<T: Real>(n: usize, k: usize, m: usize, a: &[T], b: &[T], c: &mut [T]) {
    let mut j0 = 0;
    while j0 < m {
        let j1 = (j0 + COL_TILE).min(m);
        for i in 0..n {
            let crow = &mut c[i * m + j0..i * m + j1];
            let arow = &a[i * k..(i + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                axpy(av, &b[p * m + j0..p * m + j1], crow);
            }
        }
        j0 = j1;
    }
}

/// `da[n,k] += dc[n,m] · b[k,m]ᵀ`
pub(crate) fn gemm_nt<T: Real>(n: usize, k: usize, m: usize, dc: &[T], b: &[T], da: &mut [T]) {
    let mut j0 = 0;
    while j0 < m {
        let j1 = (j0 + COL_TILE * 4).min(m);
        for i in 0..n {
            let drow = &dc[i * m + j0..i * m + j1];
            for p in 0..k {
                da[i * k + p] += dot(drow, &b[p * m + j0..p * m + j1]);
            }
        }
        j0 = j1;
    }
}

/// `db[k,m] += a[n,k]ᵀ · dc[n,m]`
pub(crate) fn gemm_tn<T: Real>(n: usize, k: usize, m: usize, a: &[T], dc: &[T], db: &mut [T]) {
    let mut j0 = 0;
    while j0 < m {
        let j1 = (j0 + COL_TILE).min(m);
        for i in 0..n {
            let drow = &dc[i * m + j0..i * m + j1];
            for p in 0..k {
                axpy(a[i * k + p], drow, &mut db[p * m + j0..p * m + j1]);
            }
        }
        j0 = j1;
    }
}

/// Geometry of a channels-last patch extraction (im2col).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl PatchGeom {
    pub fn new(input: &[usize], kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let &[batch, height, width, channels] = input else { return None };
        if kernel == 0 || stride == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(PatchGeom {
            batch,
            height,
            width,
            channels,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_height, self.out_width, self.row_len()]
    }

    /// Visits every (output offset, input offset) pair; padding is skipped.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let c = self.channels;
        let row = self.row_len();
        for b in 0..self.batch {
            for oy in 0..self.out_height {
                for ox in 0..self.out_width {
                    let out_base = ((b * self.out_height + oy) * self.out_width + ox) * row;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let in_base = ((b * self.height + iy as usize) * self.width + ix as usize) * c;
                            let o = out_base + (ky * self.kernel + kx) * c;
                            for ch in 0..c {
                                f(o + ch, in_base + ch);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn patches_forward<T: Real>(g: &PatchGeom, input: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); g.batch * g.out_height * g.out_width * g.row_len()];
    g.for_each(|o, i| out[o] = input[i]);
    out
}

pub(crate) fn patches_backward<T: Real>(g: &PatchGeom, grad_out: &[T], grad_in: &mut [T]) {
    g.for_each(|o, i| grad_in[i] += grad_out[o]);
}

/// Pixel-space coordinate of a normalized coordinate, align-corners false.
#[inline]
pub(crate) fn unnormalize<T: Real>(coord: T, size: usize) -> T {
    let n = T::of(size as f64);
    ((coord + T::one()) * n - T::one()) * T::of(0.5)
}

struct Corners<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

#[inline]
fn corners<T: Real>(x: T, y: T, width: usize, height: usize) -> Corners<T> {
    let ix = unnormalize(x, width);
    let iy = unnormalize(y, height);
    let x0 = ix.floor();
    let y0 = iy.floor();
    Corners {
        x0: x0.as_f64() as isize,
        y0: y0.as_f64() as isize,
        fx: ix - x0,
        fy: iy - y0,
    }
}

#[inline]
fn pixel<T: Real>(img: &[T], width: usize, height: usize, x: isize, y: isize) -> T {
    if x < 0 || y < 0 || x >= width as isize || y >= height as isize {
        T::zero()
    } else {
        img[y as usize * width + x as usize]
    }
}

/// Bilinear sampling of `images[b]` (H×W) at normalized points
/// `(xs[b,i], ys[b,i])` with zero padding outside the source.
pub(crate) fn bilinear_forward<T: Real>(
    images: &[T],
    height: usize,
    width: usize,
    xs: &[T],
    ys: &[T],
    points: usize,
) -> Vec<T> {
    let batch = xs.len() / points;
    let mut out = vec![T::zero(); xs.len()];
    for b in 0..batch {
        let img = &images[b * height * width..(b + 1) * height * width];
        for i in 0..points {
            let idx = b * points + i;
            let c = corners(xs[idx], ys[idx], width, height);
            let v00 = pixel(img, width, height, c.x0, c.y0);
            let v01 = pixel(img, width, height, c.x0 + 1, c.y0);
            let v10 = pixel(img, width, height, c.x0, c.y0 + 1);
            let v11 = pixel(img, width, height, c.x0 + 1, c.y0 + 1);
            let one = T::one();
            out[idx] = (one - c.fy) * ((one - c.fx) * v00 + c.fx * v01) + c.fy * ((one - c.fx) * v10 + c.fx * v11);
        }
    }
    out
}

pub(crate) struct BilinearGrads<'a, T> {
    pub image: Option<&'a mut [T]>,
    pub xs: Option<&'a mut [T]>,
    pub ys: Option<&'a mut [T]>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bilinear_backward<T: Real>(
    images: &[T],
    height: usize,
    width: usize,
    xs: &[T],
    ys: &[T],
    points: usize,
    grad_out: &[T],
    mut grads: BilinearGrads<'_, T>,
) {
    let batch = xs.len() / points;
    let one = T::one();
    let half_w = T::of(width as f64 * 0.5);
    let half_h = T::of(height as f64 * 0.5);
    for b in 0..batch {
        let off = b * height * width;
        let img = &images[off..off + height * width];
        for i in 0..points {
            let idx = b * points + i;
            let g = grad_out[idx];
            let c = corners(xs[idx], ys[idx], width, height);
            if let Some(gi) = grads.image.as_deref_mut() {
                let gi = &mut gi[off..off + height * width];
                let weights = [
                    (c.x0, c.y0, (one - c.fx) * (one - c.fy)),
                    (c.x0 + 1, c.y0, c.fx * (one - c.fy)),
                    (c.x0, c.y0 + 1, (one - c.fx) * c.fy),
                    (c.x0 + 1, c.y0 + 1, c.fx * c.fy),
                ];
                for (x, y, w) in weights {
                    if x >= 0 && y >= 0 && x < width as isize && y < height as isize {
                        gi[y as usize * width + x as usize] += g * w;
                    }
                }
            }
            if grads.xs.is_some() || grads.ys.is_some() {
                let v00 = pixel(img, width, height, c.x0, c.y0);
                let v01 = pixel(img, width, height, c.x0 + 1, c.y0);
                let v10 = pixel(img, width, height, c.x0, c.y0 + 1);
                let v11 = pixel(img, width, height, c.x0 + 1, c.y0 + 1);
                if let Some(gx) = grads.xs.as_deref_mut() {
                    let d_ix = (one - c.fy) * (v01 - v00) + c.fy * (v11 - v10);
                    gx[idx] += g * d_ix * half_w;
                }
                if let Some(gy) = grads.ys.as_deref_mut() {
                    let d_iy = (one - c.fx) * (v10 - v00) + c.fx * (v11 - v01);
                    gy[idx] += g * d_iy * half_h;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(n: usize, k: usize, m: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    #[test]
    fn tiled_gemm_matches_triple_loop_across_tiles() {
        let (n, k, m) = (3, 5, 700);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; n * m];
        gemm(n, k, m, &a, &b, &mut c);
        for (x, y) in c.iter().zip(naive(n, k, m, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_products_match_naive() {
        let (n, k, m) = (4, 3, 1100);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.3).cos()).collect();
        let dc: Vec<f64> = (0..n * m).map(|i| (i as f64 * 0.013).sin()).collect();
        let mut da = vec![0.0; n * k];
        gemm_nt(n, k, m, &dc, &b, &mut da);
        let mut db = vec![0.0; k * m];
        gemm_tn(n, k, m, &a, &dc, &mut db);
        for i in 0..n {
            for p in 0..k {
                let want: f64 = (0..m).map(|j| dc[i * m + j] * b[p * m + j]).sum();
                assert!((da[i * k + p] - want).abs() < 1e-9);
            }
        }
        for p in 0..k {
            for j in 0..m {
                let want: f64 = (0..n).map(|i| a[i * k + p] * dc[i * m + j]).sum();
                assert!((db[p * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_geometry_output_sizes() {
        let g = PatchGeom::new(&[2, 28, 28, 1], 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (14, 14));
        let g = PatchGeom::new(&[2, 7, 7, 32], 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (4, 4));
        let g = PatchGeom::new(&[2, 7, 7, 32], 1, 2, 0).unwrap();
        assert_eq!((g.out_height, g.out_width), (4, 4));
        assert!(PatchGeom::new(&[2, 7, 7], 3, 1, 1).is_none());
    }
}
