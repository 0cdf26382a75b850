//! Raw slice kernels shared by the graph ops and by image preprocessing.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1x1 stride-1 unpadded convolutions need no unfolding.
    pub fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies in `[0, width)`.
fn valid_span(g: &ConvGeometry, kx: usize, ow: usize) -> (usize, usize) {
    let (pad, stride) = (g.pad, g.stride);
    // smallest ox with ox * stride + kx >= pad
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // largest ox with ox * stride + kx < width + pad
    let limit = g.width + pad;
    let hi = if kx >= limit { 0 } else { ((limit - kx - 1) / stride + 1).min(ow) };
    (lo.min(hi), hi)
}

/// Unfold one `[C, H, W]` image into `[C*kh*kw, OH*OW]` columns.
pub fn im2col(src: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    debug_assert_eq!(cols.len(), g.col_rows() * npos);
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &src[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * npos..(row + 1) * npos];
                let (lo, hi) = valid_span(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.height as isize || lo >= hi {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src_row[first..first + hi - lo]);
                    } else {
                        for (j, out) in line[lo..hi].iter_mut().enumerate() {
                            *out = src_row[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into a `[C, H, W]` image.
pub fn col2im(cols: &[f32], g: &ConvGeometry, dst: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let npos = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let plane = &mut dst[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * npos..(row + 1) * npos];
                let (lo, hi) = valid_span(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * ow + lo..oy * ow + hi];
                    let base = iy as usize * g.width + first;
                    if g.stride == 1 {
                        for (d, v) in plane[base..base + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            plane[base + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for one output coordinate of a linear resampler.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub w0: f32,
    pub w1: f32,
}

/// Half-pixel-centre linear taps (`align_corners = false`, no antialiasing).
pub(crate) fn linear_taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f32 / out_len as f32;
    (0..out_len)
        .map(|o| {
            if in_len == out_len {
                return Tap {
                    i0: o,
                    i1: o,
                    w0: 1.0,
                    w1: 0.0,
                };
            }
            let src = (scale * (o as f32 + 0.5) - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = if i0 + 1 < in_len { i0 + 1 } else { i0 };
            let w1 = src - i0 as f32;
            Tap {
                i0,
                i1,
                w0: 1.0 - w1,
                w1,
            }
        })
        .collect()
}

/// Bilinear resize of `planes` contiguous `h x w` planes.
pub fn resize_bilinear_planar(
    src: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; planes * out_h * out_w];
    for p in 0..planes {
        let plane = &src[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &plane[t.i0 * w..(t.i0 + 1) * w];
            let r1 = &plane[t.i1 * w..(t.i1 + 1) * w];
            for (ox, s) in tx.iter().enumerate() {
                let top = s.w0 * r0[s.i0] + s.w1 * r0[s.i1];
                let bot = s.w0 * r1[s.i0] + s.w1 * r1[s.i1];
                dst[oy * out_w + ox] = t.w0 * top + t.w1 * bot;
            }
        }
    }
    out
}

/// Adjoint of [`resize_bilinear_planar`].
pub(crate) fn resize_bilinear_planar_backward(
    grad_out: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    grad_in: &mut [f32],
) {
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    for p in 0..planes {
        let g = &grad_out[p * out_h * out_w..(p + 1) * out_h * out_w];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, t) in ty.iter().enumerate() {
            for (ox, s) in tx.iter().enumerate() {
                let v = g[oy * out_w + ox];
                dst[t.i0 * w + s.i0] += t.w0 * s.w0 * v;
                dst[t.i0 * w + s.i1] += t.w0 * s.w1 * v;
                dst[t.i1 * w + s.i0] += t.w1 * s.w0 * v;
                dst[t.i1 * w + s.i1] += t.w1 * s.w1 * v;
            }
        }
    }
}

/// Bilinear resize of an interleaved `h x w x channels` image.
pub fn resize_bilinear_interleaved(
    src: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f32> {
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let ty = linear_taps(h, out_h);
    let tx = linear_taps(w, out_w);
    let mut out = vec![0.0; out_h * out_w * channels];
    for (oy, t) in ty.iter().enumerate() {
        for (ox, s) in tx.iter().enumerate() {
            for c in 0..channels {
                let at = |y: usize, x: usize| src[(y * w + x) * channels + c];
                let top = s.w0 * at(t.i0, s.i0) + s.w1 * at(t.i0, s.i1);
                let bot = s.w0 * at(t.i1, s.i0) + s.w1 * at(t.i1, s.i1);
                out[(oy * out_w + ox) * channels + c] = t.w0 * top + t.w1 * bot;
            }
        }
    }
    out
}

/// Max pooling over one `[C, H, W]` image; returns flat argmax indices.
pub(crate) fn max_pool(src: &[f32], g: &ConvGeometry, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let pad = g.pad as isize;
    for c in 0..g.channels {
        let base = c * g.height * g.width;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = u32::MAX;
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let idx = base + iy as usize * g.width + ix as usize;
                        if src[idx] > best || best_idx == u32::MAX {
                            best = src[idx];
                            best_idx = idx as u32;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_identity_when_sizes_match() {
        for t in linear_taps(7, 7) {
            assert_eq!(t.w0, 1.0);
            assert_eq!(t.i0, t.i1);
        }
    }

    #[test]
    fn halving_averages_pairs() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let out = resize_bilinear_planar(&src, 1, 4, 4, 2, 2);
        // each output is the mean of a 2x2 block
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resize_preserves_constants() {
        let src = vec![0.25; 3 * 7 * 5];
        for v in resize_bilinear_planar(&src, 3, 7, 5, 28, 28) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 6,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..2 * 5 * 6).map(|i| ((i * 7 % 11) as f32) - 5.0).collect();
        let y: Vec<f32> = (0..g.col_rows() * g.col_cols())
            .map(|i| ((i * 3 % 13) as f32) * 0.1)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    fn naive_im2col(src: &[f32], g: &ConvGeometry) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = Vec::new();
        for c in 0..g.channels {
            for ky in 0..g.kernel_h {
                for kx in 0..g.kernel_w {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            let inside = iy >= 0
                                && ix >= 0
                                && (iy as usize) < g.height
                                && (ix as usize) < g.width;
                            out.push(if inside {
                                src[(c * g.height + iy as usize) * g.width + ix as usize]
                            } else {
                                0.0
                            });
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive_unfold() {
        for (k, stride, pad, h, w) in [
            (3, 1, 1, 5, 6),
            (3, 2, 1, 7, 5),
            (7, 2, 3, 9, 11),
            (1, 2, 0, 6, 6),
            (3, 1, 0, 4, 4),
            (5, 1, 4, 3, 2),
        ] {
            let g = ConvGeometry {
                channels: 2,
                height: h,
                width: w,
                kernel_h: k,
                kernel_w: k,
                stride,
                pad,
            };
            let x: Vec<f32> = (0..2 * h * w).map(|i| i as f32 + 1.0).collect();
            let mut cols = vec![f32::NAN; g.col_rows() * g.col_cols()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "k{k} s{stride} p{pad} {h}x{w}");
        }
    }
}
