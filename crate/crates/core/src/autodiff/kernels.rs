//! Raw numeric kernels behind the differentiable ops. These work on flat
//! row-major slices and know nothing about the graph.

use matrixmultiply::dgemm;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Output columns `lo..hi` whose input column `ox * stride + kx - padding`
/// falls inside the image.
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let p = g.padding;
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(g.stride) };
    let hi = if g.in_w + p <= kx { 0 } else { (g.in_w + p - kx - 1) / g.stride + 1 };
    let hi = hi.min(ow);
    (lo.min(hi), hi)
}

/// Unfold one image `[in_ch, in_h, in_w]` into `[patch_len, out_h * out_w]`.
pub fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let src = &image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let out_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                        } else {
                            for (o, v) in out_row[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(g.stride)) {
                                *o = *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch gradients back onto the image.
pub fn col2im(g: &ConvGeom, cols: &[f64], image: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = oh * ow;
    let k = g.kernel;
    for c in 0..g.in_ch {
        let dst = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let (lo, hi) = valid_cols(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.padding;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let src_row = &src[oy * ow + lo..oy * ow + hi];
                    for (d, v) in dst_row[start..].iter_mut().step_by(g.stride).zip(src_row) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]`, all row-major. `a_t` / `b_t`
/// read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: extents and strides above describe in-bounds views of the slices.
    unsafe {
        dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let plane = g.out_h() * g.out_w();
    let klen = g.patch_len();
    let in_img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * plane;
    let mut out = vec![0.0; g.batch * out_img];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![0.0; klen * plane] };
    for b in 0..g.batch {
        let img = &input[b * in_img..(b + 1) * in_img];
        let patches: &[f64] = if g.is_pointwise() {
            img
        } else {
            im2col(g, img, &mut cols);
            &cols
        };
        let o = &mut out[b * out_img..(b + 1) * out_img];
        gemm(g.out_ch, klen, plane, weight, false, patches, false, 0.0, o);
        if let Some(bias) = bias {
            for (oc, row) in o.chunks_exact_mut(plane).enumerate() {
                let bv = bias[oc];
                row.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    out
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Patches are unfolded again from `input` rather than kept from the
/// forward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads {
    let plane = g.out_h() * g.out_w();
    let klen = g.patch_len();
    let in_img = g.in_ch * g.in_h * g.in_w;
    let out_img = g.out_ch * plane;
    let mut gi = need_input.then(|| vec![0.0; g.batch * in_img]);
    let mut gw = need_weight.then(|| vec![0.0; g.out_ch * klen]);
    let mut gb = need_bias.then(|| vec![0.0; g.out_ch]);
    let mut cols = if need_weight && !g.is_pointwise() {
        vec![0.0; klen * plane]
    } else {
        Vec::new()
    };
    let mut dcols = if need_input && !g.is_pointwise() {
        vec![0.0; klen * plane]
    } else {
        Vec::new()
    };
    for b in 0..g.batch {
        let go = &grad_out[b * out_img..(b + 1) * out_img];
        let img = &input[b * in_img..(b + 1) * in_img];
        if let Some(gw) = gw.as_mut() {
            let patches: &[f64] = if g.is_pointwise() {
                img
            } else {
                im2col(g, img, &mut cols);
                &cols
            };
            gemm(g.out_ch, plane, klen, go, false, patches, true, 1.0, gw);
        }
        if let Some(gb) = gb.as_mut() {
            for (oc, row) in go.chunks_exact(plane).enumerate() {
                gb[oc] += row.iter().sum::<f64>();
            }
        }
        if let Some(gi) = gi.as_mut() {
            let dst = &mut gi[b * in_img..(b + 1) * in_img];
            if g.is_pointwise() {
                gemm(klen, g.out_ch, plane, weight, true, go, false, 0.0, dst);
            } else {
                gemm(klen, g.out_ch, plane, weight, true, go, false, 0.0, &mut dcols);
                col2im(g, &dcols, dst);
            }
        }
    }
    ConvGrads {
        input: gi,
        weight: gw,
        bias: gb,
    }
}

/// Nearest-neighbour 2x upsampling of `[n_planes, h, w]`.
pub fn upsample2_forward(planes: usize, h: usize, w: usize, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let srow = &src[(y / 2) * w..(y / 2 + 1) * w];
            let drow = &mut dst[y * ow..(y + 1) * ow];
            for (x_out, d) in drow.iter_mut().enumerate() {
                *d = srow[x_out / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(planes: usize, h: usize, w: usize, grad: &[f64]) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &grad[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                dst[(y / 2) * w + x / 2] += src[y * ow + x];
            }
        }
    }
    out
}
