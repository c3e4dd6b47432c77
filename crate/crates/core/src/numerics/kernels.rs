//! Forward and backward kernels over flat row-major slices.
//!
//! Every reduction here accumulates sequentially in a fixed order, so results
//! are bitwise reproducible for identical inputs.

use super::tensor::Element;

/// Geometry of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if self.stride == 0 || ph < self.kernel_h || pw < self.kernel_w {
            return None;
        }
        if !(ph - self.kernel_h).is_multiple_of(self.stride) || !(pw - self.kernel_w).is_multiple_of(self.stride) {
            return None;
        }
        Some((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }
}

/// Unfolds one image `[C, H, W]` into columns `[C·kh·kw, Ho·Wo]`.
pub fn im2col<F: Element>(x: &[F], g: &ConvGeom, ho: usize, wo: usize, cols: &mut [F]) {
    let npos = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * npos);
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(F::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into `dx` (accumulating).
pub fn col2im<F: Element>(cols: &[F], g: &ConvGeom, ho: usize, wo: usize, dx: &mut [F]) {
    let npos = ho * wo;
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * npos..(row + 1) * npos];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] = dst[ix as usize] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Batched convolution forward: `x [B,C,H,W]`, `w [O,C,kh,kw]`, optional bias `[O]`.
pub fn conv2d_forward<F: Element>(
    x: &[F],
    batch: usize,
    g: &ConvGeom,
    w: &[F],
    out_channels: usize,
    bias: Option<&[F]>,
) -> Vec<F> {
    let (ho, wo) = g.out_hw().expect("conv geometry validated by caller");
    let npos = ho * wo;
    let plen = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut out = vec![F::zero(); batch * out_channels * npos];
    let mut cols = vec![F::zero(); plen * npos];
    for b in 0..batch {
        im2col(&x[b * in_len..(b + 1) * in_len], g, ho, wo, &mut cols);
        let dst = &mut out[b * out_channels * npos..(b + 1) * out_channels * npos];
        if let Some(bias) = bias {
            for (o, chunk) in dst.chunks_mut(npos).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        F::gemm(
            out_channels,
            plen,
            npos,
            w,
            (plen as isize, 1),
            &cols,
            (npos as isize, 1),
            dst,
            bias.is_some(),
        );
    }
    out
}

/// Gradients of [`conv2d_forward`]. Each output is only computed when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Element>(
    x: &[F],
    batch: usize,
    g: &ConvGeom,
    w: &[F],
    out_channels: usize,
    dy: &[F],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let (ho, wo) = g.out_hw().expect("conv geometry validated by caller");
    let npos = ho * wo;
    let plen = g.patch_len();
    let in_len = g.channels * g.height * g.width;
    let mut dx = want_dx.then(|| vec![F::zero(); batch * in_len]);
    let mut dw = want_dw.then(|| vec![F::zero(); out_channels * plen]);
    let mut cols = vec![F::zero(); plen * npos];
    for b in 0..batch {
        let dyb = &dy[b * out_channels * npos..(b + 1) * out_channels * npos];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[b * in_len..(b + 1) * in_len], g, ho, wo, &mut cols);
            // dW (O x P) += dY (O x N) · colsᵀ (N x P)
            F::gemm(
                out_channels,
                npos,
                plen,
                dyb,
                (npos as isize, 1),
                &cols,
                (1, npos as isize),
                dw,
                b > 0,
            );
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (P x N) = Wᵀ (P x O) · dY (O x N)
            F::gemm(
                plen,
                out_channels,
                npos,
                w,
                (1, plen as isize),
                dyb,
                (npos as isize, 1),
                &mut cols,
                false,
            );
            col2im(&cols, g, ho, wo, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Row-wise softmax over the trailing extent `n`. `keep(row, col)` selects the
/// entries that participate; the rest are exactly zero in the output.
pub fn softmax_rows<F: Element>(x: &[F], n: usize, keep: impl Fn(usize, usize) -> bool, out: &mut [F]) {
    for (r, (row, dst)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
        let mut max = F::neg_infinity();
        for (c, &v) in row.iter().enumerate() {
            if keep(r, c) && v > max {
                max = v;
            }
        }
        if max == F::neg_infinity() {
            dst.fill(F::zero());
            continue;
        }
        let mut total = F::zero();
        for (c, (&v, o)) in row.iter().zip(dst.iter_mut()).enumerate() {
            *o = if keep(r, c) { (v - max).exp() } else { F::zero() };
            total = total + *o;
        }
        let inv = F::one() / total;
        for o in dst.iter_mut() {
            *o = *o * inv;
        }
    }
}

/// `dx = y ⊙ (dy − Σ dy⊙y)` per row.
pub fn softmax_rows_backward<F: Element>(y: &[F], dy: &[F], n: usize, dx: &mut [F]) {
    for ((yr, dyr), dxr) in y.chunks(n).zip(dy.chunks(n)).zip(dx.chunks_mut(n)) {
        let mut dot = F::zero();
        for (&a, &b) in yr.iter().zip(dyr.iter()) {
            dot = dot + a * b;
        }
        for ((o, &a), &b) in dxr.iter_mut().zip(yr.iter()).zip(dyr.iter()) {
            *o = a * (b - dot);
        }
    }
}

/// Mean and reciprocal standard deviation of a contiguous group (two passes).
pub fn moments<F: Element>(values: impl Iterator<Item = F> + Clone, count: usize, eps: F) -> (F, F) {
    let n = F::of(count as f64);
    let mut sum = F::zero();
    for v in values.clone() {
        sum = sum + v;
    }
    let mean = sum / n;
    let mut var = F::zero();
    for v in values {
        let d = v - mean;
        var = var + d * d;
    }
    let var = var / n;
    (mean, F::one() / (var + eps).sqrt())
}

pub fn sigmoid<F: Element>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Element>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Element>(x: F) -> F {
    let c = F::of(GELU_C);
    let a = F::of(GELU_A);
    let half = F::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extent_requires_integral_stride() {
        let g = ConvGeom {
            channels: 1,
            height: 5,
            width: 5,
            kernel_h: 2,
            kernel_w: 2,
            stride: 2,
            pad: 0,
        };
        assert_eq!(g.out_hw(), None);
        let g = ConvGeom {
            pad: 1,
            kernel_h: 3,
            kernel_w: 3,
            ..g
        };
        assert_eq!(g.out_hw(), Some((3, 3)));
    }

    #[test]
    fn masked_softmax_zeroes_dropped_entries() {
        let x = [1.0f64, 2.0, 3.0];
        let mut y = [0.0; 3];
        softmax_rows(&x, 3, |_, c| c != 2, &mut y);
        assert_eq!(y[2], 0.0);
        assert!((y[0] + y[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
