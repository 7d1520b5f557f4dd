//! 2-D convolution: grouped, strided, dilated.
//!
//! `conv2d` dispatches to a pointwise GEMM, a direct depthwise kernel, or
//! im2col+GEMM. `conv2d_direct` is the plain-loop reference the fast paths
//! are tested against. All inner products accumulate in f64.

use super::{Elem, GradFn, Tensor};
use crate::error::{Error, Result};

/// Static description of one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub dilation: usize,
    pub padding: (usize, usize),
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride: (1, 1),
            dilation: 1,
            padding: (0, 0),
            groups: 1,
        }
    }

    pub fn stride(mut self, s: usize) -> ConvSpec {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: usize) -> ConvSpec {
        self.padding = (p, p);
        self
    }

    pub fn dilation(mut self, d: usize) -> ConvSpec {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> ConvSpec {
        self.groups = g;
        self
    }

    /// Depthwise: one filter per channel.
    pub fn depthwise(channels: usize, kernel: usize) -> ConvSpec {
        ConvSpec::new(channels, channels, kernel).groups(channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.in_channels % self.groups != 0 {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "groups",
                expected: format!("divisor of in_channels {}", self.in_channels),
                got: self.groups.to_string(),
            });
        }
        if self.out_channels % self.groups != 0 {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "groups",
                expected: format!("divisor of out_channels {}", self.out_channels),
                got: self.groups.to_string(),
            });
        }
        if self.dilation == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "kernel",
                expected: "positive kernel and dilation".into(),
                got: format!("kernel {:?} dilation {}", self.kernel, self.dilation),
            });
        }
        Ok(())
    }

    /// Dilated kernel extent along one axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    /// Output spatial size for an input of `h`x`w`.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (ekh, ekw) = self.effective_kernel();
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if ekh > ph {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "height",
                expected: format!("padded input >= effective kernel {}", ekh),
                got: ph.to_string(),
            });
        }
        if ekw > pw {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "width",
                expected: format!("padded input >= effective kernel {}", ekw),
                got: pw.to_string(),
            });
        }
        Ok(((ph - ekh) / self.stride.0 + 1, (pw - ekw) / self.stride.1 + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

fn check_inputs(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<(usize, usize, usize)> {
    spec.validate()?;
    let xs = x.shape();
    if xs.len() != 4 {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "rank",
            expected: "4 (N,C,H,W)".into(),
            got: xs.len().to_string(),
        });
    }
    if xs[1] != spec.in_channels {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "channel",
            expected: spec.in_channels.to_string(),
            got: xs[1].to_string(),
        });
    }
    if w.shape() != spec.weight_shape() {
        return Err(Error::Shape {
            op: "conv2d",
            axis: "weight",
            expected: format!("{:?}", spec.weight_shape()),
            got: format!("{:?}", w.shape()),
        });
    }
    if let Some(b) = b {
        if b.shape() != [spec.out_channels] {
            return Err(Error::Shape {
                op: "conv2d",
                axis: "bias",
                expected: format!("[{}]", spec.out_channels),
                got: format!("{:?}", b.shape()),
            });
        }
    }
    Ok((xs[0], xs[2], xs[3]))
}

/// f64 GEMM: C = A(m x k) * B(k x n) + beta*C, row-major slices.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || k == 0 || n == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(feature = "f32")]
fn to_f64(xs: &[Elem]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

#[cfg(not(feature = "f32"))]
fn to_f64(xs: &[Elem]) -> Vec<f64> {
    xs.to_vec()
}

fn from_f64(xs: Vec<f64>) -> Vec<Elem> {
    #[cfg(feature = "f32")]
    {
        xs.into_iter().map(|v| v as Elem).collect()
    }
    #[cfg(not(feature = "f32"))]
    {
        xs
    }
}

/// Gather the im2col patch matrix for one image and group:
/// rows = Cg*kh*kw, cols = out_h*out_w.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    group_c0: usize,
    cg: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
    col: &mut [f64],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let d = spec.dilation;
    let cols = out_h * out_w;
    debug_assert_eq!(col.len(), cg * kh * kw * cols);
    for ci in 0..cg {
        let xc = &x[(group_c0 + ci) * h * w..(group_c0 + ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * cols;
                for oy in 0..out_h {
                    let iy = (oy * sh + ky * d) as isize - ph as isize;
                    let dst = &mut col[row + oy * out_w..row + (oy + 1) * out_w];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let xrow = &xc[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * sw + kx * d) as isize - pw as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            xrow[ix as usize]
                        };
                    }
                }
            }
        }
    }
    let _ = c_in;
}

/// Scatter-add the transpose of im2col: col (Cg*kh*kw x out_h*out_w) back
/// into the input gradient.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f64],
    h: usize,
    w: usize,
    group_c0: usize,
    cg: usize,
    spec: &ConvSpec,
    out_h: usize,
    out_w: usize,
    gx: &mut [f64],
) {
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let d = spec.dilation;
    let cols = out_h * out_w;
    for ci in 0..cg {
        let gc = &mut gx[(group_c0 + ci) * h * w..(group_c0 + ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * cols;
                for oy in 0..out_h {
                    let iy = (oy * sh + ky * d) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..out_w {
                        let ix = (ox * sw + kx * d) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gc[base + ix as usize] += col[row + oy * out_w + ox];
                    }
                }
            }
        }
    }
}

fn is_pointwise(spec: &ConvSpec) -> bool {
    spec.kernel == (1, 1)
        && spec.stride == (1, 1)
        && spec.padding == (0, 0)
        && spec.dilation == 1
        && spec.groups == 1
}

fn is_depthwise(spec: &ConvSpec) -> bool {
    spec.groups == spec.in_channels && spec.out_channels == spec.in_channels
}

fn forward_values(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    spec: &ConvSpec,
    n: usize,
    h: usize,
    w_in: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let hw_out = out_h * out_w;
    let mut y = vec![0.0f64; n * c_out * hw_out];

    if is_pointwise(spec) {
        // y[n] = W (Cout x Cin) * x[n] (Cin x HW)
        for ni in 0..n {
            gemm(
                c_out,
                c_in,
                hw_out,
                w,
                &x[ni * c_in * hw_out..(ni + 1) * c_in * hw_out],
                0.0,
                &mut y[ni * c_out * hw_out..(ni + 1) * c_out * hw_out],
            );
        }
    } else if is_depthwise(spec) {
        let (kh, kw) = spec.kernel;
        let (sh, sw) = spec.stride;
        let (ph, pw) = spec.padding;
        let d = spec.dilation;
        for ni in 0..n {
            for ci in 0..c_in {
                let xc = &x[(ni * c_in + ci) * h * w_in..(ni * c_in + ci + 1) * h * w_in];
                let wc = &w[ci * kh * kw..(ci + 1) * kh * kw];
                let yc = &mut y[(ni * c_out + ci) * hw_out..(ni * c_out + ci + 1) * hw_out];
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let mut acc = 0.0f64;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky * d) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx * d) as isize - pw as isize;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                acc += wc[ky * kw + kx] * xc[iy as usize * w_in + ix as usize];
                            }
                        }
                        yc[oy * out_w + ox] = acc;
                    }
                }
            }
        }
    } else {
        let g = spec.groups;
        let cg_in = c_in / g;
        let cg_out = c_out / g;
        let k = cg_in * spec.kernel.0 * spec.kernel.1;
        let mut col = vec![0.0f64; k * hw_out];
        for ni in 0..n {
            let xn = &x[ni * c_in * h * w_in..(ni + 1) * c_in * h * w_in];
            for gi in 0..g {
                im2col(
                    xn,
                    c_in,
                    h,
                    w_in,
                    gi * cg_in,
                    cg_in,
                    spec,
                    out_h,
                    out_w,
                    &mut col,
                );
                let wg = &w[gi * cg_out * k..(gi + 1) * cg_out * k];
                let yg = &mut y[(ni * c_out + gi * cg_out) * hw_out
                    ..(ni * c_out + (gi + 1) * cg_out) * hw_out];
                gemm(cg_out, k, hw_out, wg, &col, 0.0, yg);
            }
        }
    }

    if let Some(b) = b {
        for ni in 0..n {
            for co in 0..c_out {
                let bias = b[co];
                for v in &mut y[(ni * c_out + co) * hw_out..(ni * c_out + co + 1) * hw_out] {
                    *v += bias;
                }
            }
        }
    }
    y
}

struct ConvGrad {
    spec: ConvSpec,
    has_bias: bool,
    in_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl GradFn for ConvGrad {
    fn backward(&self, grad_out: &[Elem], parents: &[Tensor]) -> Vec<Option<Vec<Elem>>> {
        let spec = &self.spec;
        let x = to_f64(&parents[0].data());
        let w = to_f64(&parents[1].data());
        let gy = to_f64(grad_out);
        let n = parents[0].shape()[0];
        let (h, w_in) = self.in_hw;
        let (out_h, out_w) = self.out_hw;
        let hw_out = out_h * out_w;
        let c_in = spec.in_channels;
        let c_out = spec.out_channels;

        let mut gx = vec![0.0f64; x.len()];
        let mut gw = vec![0.0f64; w.len()];

        if is_pointwise(spec) {
            // gx[n] = W^T * gy[n]; gw += gy[n] * x[n]^T
            // Row-major transpose handled via stride arguments.
            for ni in 0..n {
                let gyn = &gy[ni * c_out * hw_out..(ni + 1) * c_out * hw_out];
                let xn = &x[ni * c_in * hw_out..(ni + 1) * c_in * hw_out];
                unsafe {
                    // gx (Cin x HW) = W^T (Cin x Cout) * gy (Cout x HW)
                    matrixmultiply::dgemm(
                        c_in,
                        c_out,
                        hw_out,
                        1.0,
                        w.as_ptr(),
                        1,
                        c_in as isize,
                        gyn.as_ptr(),
                        hw_out as isize,
                        1,
                        1.0,
                        gx[ni * c_in * hw_out..].as_mut_ptr(),
                        hw_out as isize,
                        1,
                    );
                    // gw (Cout x Cin) += gy (Cout x HW) * x^T (HW x Cin)
                    matrixmultiply::dgemm(
                        c_out,
                        hw_out,
                        c_in,
                        1.0,
                        gyn.as_ptr(),
                        hw_out as isize,
                        1,
                        xn.as_ptr(),
                        1,
                        hw_out as isize,
                        1.0,
                        gw.as_mut_ptr(),
                        c_in as isize,
                        1,
                    );
                }
            }
        } else if is_depthwise(spec) {
            let (kh, kw) = spec.kernel;
            let (sh, sw) = spec.stride;
            let (ph, pw) = spec.padding;
            let d = spec.dilation;
            for ni in 0..n {
                for ci in 0..c_in {
                    let xc = &x[(ni * c_in + ci) * h * w_in..(ni * c_in + ci + 1) * h * w_in];
                    let wc = &w[ci * kh * kw..(ci + 1) * kh * kw];
                    let gyc = &gy[(ni * c_out + ci) * hw_out..(ni * c_out + ci + 1) * hw_out];
                    let gxc = &mut gx[(ni * c_in + ci) * h * w_in..(ni * c_in + ci + 1) * h * w_in];
                    let gwc = &mut gw[ci * kh * kw..(ci + 1) * kh * kw];
                    for oy in 0..out_h {
                        for ox in 0..out_w {
                            let g = gyc[oy * out_w + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * sh + ky * d) as isize - ph as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * sw + kx * d) as isize - pw as isize;
                                    if ix < 0 || ix >= w_in as isize {
                                        continue;
                                    }
                                    let xi = iy as usize * w_in + ix as usize;
                                    gwc[ky * kw + kx] += g * xc[xi];
                                    gxc[xi] += g * wc[ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
        } else {
            let g = spec.groups;
            let cg_in = c_in / g;
            let cg_out = c_out / g;
            let k = cg_in * spec.kernel.0 * spec.kernel.1;
            let mut col = vec![0.0f64; k * hw_out];
            let mut gcol = vec![0.0f64; k * hw_out];
            for ni in 0..n {
                let xn = &x[ni * c_in * h * w_in..(ni + 1) * c_in * h * w_in];
                for gi in 0..g {
                    im2col(
                        xn,
                        c_in,
                        h,
                        w_in,
                        gi * cg_in,
                        cg_in,
                        spec,
                        out_h,
                        out_w,
                        &mut col,
                    );
                    let gyg = &gy[(ni * c_out + gi * cg_out) * hw_out
                        ..(ni * c_out + (gi + 1) * cg_out) * hw_out];
                    let wg = &w[gi * cg_out * k..(gi + 1) * cg_out * k];
                    unsafe {
                        // gw_g (Cg_out x K) += gy_g (Cg_out x HW) * col^T (HW x K)
                        matrixmultiply::dgemm(
                            cg_out,
                            hw_out,
                            k,
                            1.0,
                            gyg.as_ptr(),
                            hw_out as isize,
                            1,
                            col.as_ptr(),
                            1,
                            hw_out as isize,
                            1.0,
                            gw[gi * cg_out * k..].as_mut_ptr(),
                            k as isize,
                            1,
                        );
                        // gcol (K x HW) = W_g^T (K x Cg_out) * gy_g
                        matrixmultiply::dgemm(
                            k,
                            cg_out,
                            hw_out,
                            1.0,
                            wg.as_ptr(),
                            1,
                            k as isize,
                            gyg.as_ptr(),
                            hw_out as isize,
                            1,
                            0.0,
                            gcol.as_mut_ptr(),
                            hw_out as isize,
                            1,
                        );
                    }
                    col2im_add(
                        &gcol,
                        h,
                        w_in,
                        gi * cg_in,
                        cg_in,
                        spec,
                        out_h,
                        out_w,
                        &mut gx[ni * c_in * h * w_in..(ni + 1) * c_in * h * w_in],
                    );
                }
            }
        }

        let gb = if self.has_bias {
            let mut gb = vec![0.0f64; c_out];
            for ni in 0..n {
                for co in 0..c_out {
                    let mut acc = 0.0f64;
                    for &v in &gy[(ni * c_out + co) * hw_out..(ni * c_out + co + 1) * hw_out] {
                        acc += v;
                    }
                    gb[co] += acc;
                }
            }
            Some(from_f64(gb))
        } else {
            None
        };

        let mut grads = vec![Some(from_f64(gx)), Some(from_f64(gw))];
        if self.has_bias {
            grads.push(gb);
        }
        grads
    }
}

/// Grouped dilated convolution over N,C,H,W input.
pub fn conv2d(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, h, w_in) = check_inputs(x, w, b, spec)?;
    let (out_h, out_w) = spec.output_size(h, w_in)?;
    let xb = to_f64(&x.data());
    let wb = to_f64(&w.data());
    let bb = b.map(|t| to_f64(&t.data()));
    let y = forward_values(&xb, &wb, bb.as_deref(), spec, n, h, w_in, out_h, out_w);
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(
        vec![n, spec.out_channels, out_h, out_w],
        from_f64(y),
        parents,
        Box::new(ConvGrad {
            spec: *spec,
            has_bias: b.is_some(),
            in_hw: (h, w_in),
            out_hw: (out_h, out_w),
        }),
    ))
}

/// Plain-loop reference convolution. No tape. Used as the correctness
/// oracle for the dispatched paths.
pub fn conv2d_direct(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    let (n, h, w_in) = check_inputs(x, w, b, spec)?;
    let (out_h, out_w) = spec.output_size(h, w_in)?;
    let xd = x.data();
    let wd = w.data();
    let bd = b.map(|t| t.data());
    let c_in = spec.in_channels;
    let c_out = spec.out_channels;
    let g = spec.groups;
    let cg_in = c_in / g;
    let cg_out = c_out / g;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    let d = spec.dilation;
    let mut y = vec![0.0 as Elem; n * c_out * out_h * out_w];
    for ni in 0..n {
        for co in 0..c_out {
            let gi = co / cg_out;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0f64;
                    for ci in 0..cg_in {
                        let c = gi * cg_in + ci;
                        for ky in 0..kh {
                            let iy = (oy * sh + ky * d) as isize - ph as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx * d) as isize - pw as isize;
                                if ix < 0 || ix >= w_in as isize {
                                    continue;
                                }
                                let xv = xd[((ni * c_in + c) * h + iy as usize) * w_in
                                    + ix as usize];
                                let wv = wd[((co * cg_in + ci) * kh + ky) * kw + kx];
                                acc += (xv as f64) * (wv as f64);
                            }
                        }
                    }
                    if let Some(bd) = &bd {
                        acc += bd[co] as f64;
                    }
                    y[((ni * c_out + co) * out_h + oy) * out_w + ox] = acc as Elem;
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, c_out, out_h, out_w], y))
}
