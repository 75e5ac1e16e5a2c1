//! Dense kernels behind the differentiable primitives.

use super::scalar::Scalar;

/// `c[m×n] (+)= op(a) · op(b)` for contiguous row-major operands.
///
/// With `ta`, `a` is stored `k×m`; with `tb`, `b` is stored `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
    accumulate: bool,
) {
    let a_strides = if ta { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, a, a_strides, b, b_strides, beta, c, (n as isize, 1));
}

/// Geometry of a 2-D convolution over `[N, C, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeom {
    pub fn output_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || w + 2 * pw < kw {
            return None;
        }
        Some(((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1))
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }
}

/// Columns `[lo, hi)` of an output row whose input column `ox·stride + kj − pad` is in bounds.
fn valid_span(wo: usize, w: usize, stride: usize, kj: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kj).div_ceil(stride).min(wo);
    let hi = if w + pad > kj { ((w + pad - kj - 1) / stride + 1).min(wo) } else { 0 };
    (lo, hi.max(lo))
}

/// Unfolds one image `[C, H, W]` into `cols` rows of length `ld`, starting at
/// column `offset`: row `(c·kh + ki)·kw + kj`, column `offset + oy·wo + ox`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(img: &[T], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, cols: &mut [T], ld: usize, offset: usize) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let positions = ho * wo;
    for c in 0..g.in_channels {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let dst = &mut cols[row * ld + offset..row * ld + offset + positions];
                let (lo, hi) = valid_span(wo, w, sw, kj, pw);
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy as usize >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if sw == 1 {
                        let start = lo + kj - pw;
                        line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for ox in lo..hi {
                            line[ox] = src[ox * sw + kj - pw];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(cols: &[T], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, img: &mut [T], ld: usize, offset: usize) {
    let (kh, kw) = g.kernel;
    let (sh, sw) = g.stride;
    let (ph, pw) = g.padding;
    let positions = ho * wo;
    for c in 0..g.in_channels {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (c * kh + ki) * kw + kj;
                let src = &cols[row * ld + offset..row * ld + offset + positions];
                let (lo, hi) = valid_span(wo, w, sw, kj, pw);
                for oy in 0..ho {
                    let iy = (oy * sh + ki) as isize - ph as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    let line = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo..(oy + 1) * wo];
                    if sw == 1 {
                        let start = lo + kj - pw;
                        for (d, &v) in line[start..start + hi - lo].iter_mut().zip(&s[lo..hi]) {
                            *d += v;
                        }
                    } else {
                        for ox in lo..hi {
                            line[ox * sw + kj - pw] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Images per GEMM so that each call sees a few thousand columns.
fn chunk_images(positions: usize) -> usize {
    (4096 / positions.max(1)).max(1)
}

/// Forward convolution. `x` is `[N, Ci, H, W]`, `weight` is `[Co, Ci, kh, kw]`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (ho, wo) = g.output_hw(h, w).expect("validated geometry");
    let positions = ho * wo;
    let k = g.patch_len();
    let in_size = g.in_channels * h * w;
    let out_size = g.out_channels * positions;
    let co = g.out_channels;
    let mut out = vec![T::zero(); n * out_size];
    let chunk = chunk_images(positions).min(n);
    let mut cols = vec![T::zero(); k * chunk * positions];
    let mut tmp = vec![T::zero(); co * chunk * positions];
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let ld = b * positions;
        for i in 0..b {
            let img = &x[(start + i) * in_size..(start + i + 1) * in_size];
            im2col(img, h, w, g, ho, wo, &mut cols, ld, i * positions);
        }
        matmul(weight, &cols[..k * ld], &mut tmp[..co * ld], co, k, ld, false, false, false);
        for i in 0..b {
            let dst = &mut out[(start + i) * out_size..(start + i + 1) * out_size];
            for (c, chunk_out) in dst.chunks_mut(positions).enumerate() {
                let src = &tmp[c * ld + i * positions..c * ld + (i + 1) * positions];
                match bias {
                    Some(bv) => chunk_out.iter_mut().zip(src).for_each(|(o, &s)| *o = s + bv[c]),
                    None => chunk_out.copy_from_slice(src),
                }
            }
        }
        start += b;
    }
    out
}

/// Gradients of a convolution with respect to input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    h: usize,
    w: usize,
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (ho, wo) = g.output_hw(h, w).expect("validated geometry");
    let positions = ho * wo;
    let k = g.patch_len();
    let in_size = g.in_channels * h * w;
    let co = g.out_channels;
    let out_size = co * positions;
    let mut dx = need_input.then(|| vec![T::zero(); n * in_size]);
    let mut dw = need_weight.then(|| vec![T::zero(); co * k]);
    let mut db = vec![T::zero(); co];
    let chunk = chunk_images(positions).min(n);
    let mut cols = vec![T::zero(); k * chunk * positions];
    let mut gout = vec![T::zero(); co * chunk * positions];
    let mut start = 0;
    while start < n {
        let b = chunk.min(n - start);
        let ld = b * positions;
        // Gather dOut into [Co, b·P].
        for i in 0..b {
            let go = &grad_out[(start + i) * out_size..(start + i + 1) * out_size];
            for (c, src) in go.chunks(positions).enumerate() {
                db[c] += src.iter().copied().sum::<T>();
                gout[c * ld + i * positions..c * ld + (i + 1) * positions].copy_from_slice(src);
            }
        }
        if let Some(dw) = dw.as_mut() {
            for i in 0..b {
                let img = &x[(start + i) * in_size..(start + i + 1) * in_size];
                im2col(img, h, w, g, ho, wo, &mut cols, ld, i * positions);
            }
            // dW[Co, K] += dOut[Co, bP] · cols[K, bP]^T
            matmul(&gout[..co * ld], &cols[..k * ld], dw, co, ld, k, false, true, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols[K, bP] = W[Co, K]^T · dOut[Co, bP]
            matmul(weight, &gout[..co * ld], &mut cols[..k * ld], k, co, ld, true, false, false);
            for i in 0..b {
                let dimg = &mut dx[(start + i) * in_size..(start + i + 1) * in_size];
                col2im(&cols, h, w, g, ho, wo, dimg, ld, i * positions);
            }
        }
        start += b;
    }
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], h: usize, w: usize, k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (ho, wo) = g.output_hw(h, w).unwrap();
        let mut out = vec![0.0; g.out_channels * ho * wo];
        for co in 0..g.out_channels {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..g.in_channels {
                        for ki in 0..g.kernel.0 {
                            for kj in 0..g.kernel.1 {
                                let iy = (oy * g.stride.0 + ki) as isize - g.padding.0 as isize;
                                let ix = (ox * g.stride.1 + kj) as isize - g.padding.1 as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ci * h + iy as usize) * w + ix as usize]
                                        * k[((co * g.in_channels + ci) * g.kernel.0 + ki) * g.kernel.1 + kj];
                                }
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 3,
            kernel: (3, 2),
            stride: (2, 1),
            padding: (1, 0),
        };
        let (h, w) = (5, 4);
        let x: Vec<f64> = (0..2 * h * w).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 2 * 3 * 2).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
        let fast = conv2d_forward(&x, 1, h, w, &k, None, &g);
        assert_eq!(fast, naive_conv(&x, h, w, &k, &g));
    }

    #[test]
    fn batched_images_match_per_image_loops() {
        for (stride, pad) in [(1, 1), (2, 1), (2, 0), (3, 2)] {
            let g = ConvGeom {
                in_channels: 2,
                out_channels: 3,
                kernel: (3, 3),
                stride: (stride, stride),
                padding: (pad, pad),
            };
            let (n, h, w) = (3, 7, 6);
            let x: Vec<f64> = (0..n * 2 * h * w).map(|i| ((i * 7) % 13) as f64 - 6.0).collect();
            let k: Vec<f64> = (0..3 * 2 * 9).map(|i| ((i * 5) % 7) as f64 - 3.0).collect();
            let fast = conv2d_forward(&x, n, h, w, &k, None, &g);
            let per = fast.len() / n;
            for i in 0..n {
                let img = &x[i * 2 * h * w..(i + 1) * 2 * h * w];
                assert_eq!(&fast[i * per..(i + 1) * per], naive_conv(img, h, w, &k, &g).as_slice());
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_channels: 2,
            out_channels: 1,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
        };
        let (h, w) = (5, 6);
        let (ho, wo) = g.output_hw(h, w).unwrap();
        let x: Vec<f64> = (0..2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..18 * ho * wo).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; 18 * ho * wo];
        im2col(&x, h, w, &g, ho, wo, &mut cols, ho * wo, 0);
        let mut back = vec![0.0; x.len()];
        col2im(&y, h, w, &g, ho, wo, &mut back, ho * wo, 0);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
