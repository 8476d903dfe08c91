//! Raw numeric kernels: convolution via im2col, pooling, ROIAlign sampling plans.
//!
//! All feature maps are single images in `C x H x W` layout.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// Unfolds `x` into a `(C*k*k) x (oh*ow)` column matrix (stride 1).
pub fn im2col<T: Scalar>(x: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut cols = vec![T::zero(); g.col_rows() * oh * ow];
    for c in 0..g.in_c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    let shift = kx as isize - g.pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.w as isize - shift).min(ow as isize)).max(0) as usize;
                    for ox in lo..hi {
                        drow[ox] = src[(ox as isize + shift) as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back onto a `C x H x W` buffer.
pub fn col2im<T: Scalar>(cols: &[T], g: ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![T::zero(); g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let shift = kx as isize - g.pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = ((g.w as isize - shift).min(ow as isize)).max(0) as usize;
                    for ox in lo..hi {
                        drow[(ox as isize + shift) as usize] += srow[ox];
                    }
                }
            }
        }
    }
    x
}

/// `y = W * im2col(x) + b`; weight is `O x C x k x k`.
pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: &[T], g: ConvGeom) -> Vec<T> {
    let out_c = bias.len();
    let n = g.out_h() * g.out_w();
    let kk = g.col_rows();
    assert_eq!(weight.len(), out_c * kk, "conv weight shape mismatch");
    let mut y = vec![T::zero(); out_c * n];
    for (o, row) in y.chunks_mut(n).enumerate() {
        row.fill(bias[o]);
    }
    if g.k == 1 && g.pad == 0 {
        T::gemm(
            out_c,
            kk,
            n,
            T::one(),
            weight,
            kk,
            1,
            x,
            n,
            1,
            T::one(),
            &mut y,
            n,
            1,
        );
    } else {
        let cols = im2col(x, g);
        T::gemm(
            out_c,
            kk,
            n,
            T::one(),
            weight,
            kk,
            1,
            &cols,
            n,
            1,
            T::one(),
            &mut y,
            n,
            1,
        );
    }
    y
}

pub struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    dy: &[T],
    g: ConvGeom,
    out_c: usize,
    need_dx: bool,
    need_dw: bool,
) -> ConvGrads<T> {
    let n = g.out_h() * g.out_w();
    let kk = g.col_rows();
    let db: Vec<T> = dy.chunks(n).map(|r| r.iter().copied().sum()).collect();
    let direct = g.k == 1 && g.pad == 0;
    let mut dw = vec![T::zero(); out_c * kk];
    if need_dw {
        let owned;
        let cols: &[T] = if direct {
            x
        } else {
            owned = im2col(x, g);
            &owned
        };
        // dW = dY * cols^T
        T::gemm(
            out_c,
            n,
            kk,
            T::one(),
            dy,
            n,
            1,
            cols,
            1,
            n,
            T::zero(),
            &mut dw,
            kk,
            1,
        );
    }
    let dx = if need_dx {
        let mut dcols = vec![T::zero(); kk * n];
        // dcols = W^T * dY
        T::gemm(
            kk,
            out_c,
            n,
            T::one(),
            weight,
            1,
            kk,
            dy,
            n,
            1,
            T::zero(),
            &mut dcols,
            n,
            1,
        );
        Some(if direct { dcols } else { col2im(&dcols, g) })
    } else {
        None
    };
    ConvGrads { dx, dw, db }
}

/// 2x2 stride-2 max pooling. Odd trailing rows/columns are dropped.
pub fn maxpool2<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                y.push(x[best]);
                arg.push(best as u32);
            }
        }
    }
    (y, arg)
}

/// Precomputed sparse bilinear weights mapping a `C x h x w` feature onto
/// `R x C x k x k` pooled regions. Weights are shared across channels.
#[derive(Debug, Clone)]
pub struct RoiPlan {
    pub num_rois: usize,
    pub out_size: usize,
    pub feat_h: usize,
    pub feat_w: usize,
    /// `(roi * k*k + bin, pixel, weight)`
    pub taps: Vec<(u32, u32, f64)>,
}

/// Samples per bin along each axis.
pub const ROI_SAMPLING: usize = 2;

fn bilinear_taps(y: f64, x: f64, h: usize, w: usize, weight: f64, out: &mut Vec<(u32, f64)>) {
    if y < -1.0 || y > h as f64 || x < -1.0 || x > w as f64 {
        return;
    }
    let y = y.max(0.0);
    let x = x.max(0.0);
    let (mut y0, mut x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1);
    let (mut ly, mut lx) = (y - y0 as f64, x - x0 as f64);
    if y0 >= h - 1 {
        y0 = h - 1;
        y1 = h - 1;
        ly = 0.0;
    } else {
        y1 = y0 + 1;
    }
    if x0 >= w - 1 {
        x0 = w - 1;
        x1 = w - 1;
        lx = 0.0;
    } else {
        x1 = x0 + 1;
    }
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    for (yy, xx, wt) in [
        (y0, x0, hy * hx),
        (y0, x1, hy * lx),
        (y1, x0, ly * hx),
        (y1, x1, ly * lx),
    ] {
        if wt != 0.0 {
            out.push(((yy * w + xx) as u32, wt * weight));
        }
    }
}

/// Builds the sampling plan for boxes given in image coordinates.
///
/// Pixel `i` of the feature map covers `[i, i+1) / scale` in the image, so
/// sample coordinates are shifted by half a cell. Samples further than one
/// cell outside the map read zero; within that border they clamp to the edge.
/// A box whose mapped width or height is not positive is sampled once at its
/// center and the value replicated over every bin.
pub fn roi_align_plan(
    boxes: &[[f64; 4]],
    scale: f64,
    feat_h: usize,
    feat_w: usize,
    out_size: usize,
) -> RoiPlan {
    let k = out_size;
    let mut taps = Vec::new();
    let mut buf = Vec::with_capacity(4);
    for (r, b) in boxes.iter().enumerate() {
        let x1 = b[0] * scale - 0.5;
        let y1 = b[1] * scale - 0.5;
        let x2 = b[2] * scale - 0.5;
        let y2 = b[3] * scale - 0.5;
        let (rw, rh) = (x2 - x1, y2 - y1);
        let degenerate = !(rw > 0.0 && rh > 0.0);
        for by in 0..k {
            for bx in 0..k {
                let bin = (r * k * k + by * k + bx) as u32;
                buf.clear();
                if degenerate {
                    bilinear_taps(
                        (y1 + y2) / 2.0,
                        (x1 + x2) / 2.0,
                        feat_h,
                        feat_w,
                        1.0,
                        &mut buf,
                    );
                } else {
                    let (bh, bw) = (rh / k as f64, rw / k as f64);
                    let n = (ROI_SAMPLING * ROI_SAMPLING) as f64;
                    for iy in 0..ROI_SAMPLING {
                        let y = y1 + by as f64 * bh + (iy as f64 + 0.5) * bh / ROI_SAMPLING as f64;
                        for ix in 0..ROI_SAMPLING {
                            let x =
                                x1 + bx as f64 * bw + (ix as f64 + 0.5) * bw / ROI_SAMPLING as f64;
                            bilinear_taps(y, x, feat_h, feat_w, 1.0 / n, &mut buf);
                        }
                    }
                }
                taps.extend(buf.iter().map(|&(p, w)| (bin, p, w)));
            }
        }
    }
    RoiPlan {
        num_rois: boxes.len(),
        out_size,
        feat_h,
        feat_w,
        taps,
    }
}

/// Output layout `R x C x k x k`.
pub fn roi_align_forward<T: Scalar>(x: &[T], channels: usize, plan: &RoiPlan) -> Vec<T> {
    let kk = plan.out_size * plan.out_size;
    let hw = plan.feat_h * plan.feat_w;
    assert_eq!(x.len(), channels * hw, "roi_align feature size mismatch");
    let mut out = vec![T::zero(); plan.num_rois * channels * kk];
    for &(bin, pix, wt) in &plan.taps {
        let (r, b) = (bin as usize / kk, bin as usize % kk);
        let wt = T::of(wt);
        for c in 0..channels {
            out[(r * channels + c) * kk + b] += wt * x[c * hw + pix as usize];
        }
    }
    out
}

pub fn roi_align_backward<T: Scalar>(dy: &[T], channels: usize, plan: &RoiPlan) -> Vec<T> {
    let kk = plan.out_size * plan.out_size;
    let hw = plan.feat_h * plan.feat_w;
    let mut dx = vec![T::zero(); channels * hw];
    for &(bin, pix, wt) in &plan.taps {
        let (r, b) = (bin as usize / kk, bin as usize % kk);
        let wt = T::of(wt);
        for c in 0..channels {
            dx[c * hw + pix as usize] += wt * dy[(r * channels + c) * kk + b];
        }
    }
    dx
}

/// Bilinear resize of a single `h x w` plane to `oh x ow` (half-pixel centers, edge clamp).
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for oy in 0..oh {
        let y = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = y.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ly = y - y0 as f64;
        for ox in 0..ow {
            let x = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = x.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let lx = x - x0 as f64;
            let v = (1.0 - ly) * ((1.0 - lx) * src[y0 * w + x0] + lx * src[y0 * w + x1])
                + ly * ((1.0 - lx) * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            out.push(v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], w: &[f64], b: &[f64], g: ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut y = vec![0.0; b.len() * oh * ow];
        for o in 0..b.len() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ky in 0..g.k {
                            for kx in 0..g.k {
                                let iy = oy as isize + ky as isize - g.pad as isize;
                                let ix = ox as isize + kx as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w
                                {
                                    acc += w[((o * g.in_c + c) * g.k + ky) * g.k + kx]
                                        * x[(c * g.h + iy as usize) * g.w + ix as usize];
                                }
                            }
                        }
                    }
                    y[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_direct_loops() {
        let g = ConvGeom {
            in_c: 2,
            h: 5,
            w: 4,
            k: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w: Vec<f64> = (0..54).map(|i| ((i * 5) % 7) as f64 * 0.1 - 0.3).collect();
        let b = [0.5, -1.0, 0.25];
        let got = conv2d_forward(&x, &w, &b, g);
        let want = naive_conv(&x, &w, &b, g);
        for (a, e) in got.iter().zip(&want) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_c: 2,
            h: 4,
            w: 3,
            k: 3,
            pad: 1,
        };
        let x: Vec<f64> = (0..24).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, g);
        let r: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.37).cos()).collect();
        let lhs: f64 = cols.iter().zip(&r).map(|(a, b)| a * b).sum();
        let back = col2im(&r, g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn maxpool_picks_window_max() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 1.0];
        let (y, arg) = maxpool2(&x, 2, 2, 2);
        assert_eq!(y, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn resize_identity_when_same_size() {
        let src = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(resize_bilinear(&src, 2, 2, 2, 2), src.to_vec());
    }
}
