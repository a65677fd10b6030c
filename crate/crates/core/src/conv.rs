//! Stride-1 dilated convolution, its transpose, and depthwise convolution.
//!
//! Dense convolutions go through im2col + GEMM. The transposed convolution is
//! the exact adjoint of the forward map, so both share one geometry and the
//! same two kernels (`apply` and `adjoint`).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Geometry of a stride-1 convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub padding: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Size-preserving layer: `padding = dilation * (k - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            dilation,
            padding: dilation * (kernel_size.saturating_sub(1)) / 2,
            has_bias: true,
        }
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.has_bias = false;
        self
    }

    /// Distance between the first and last kernel taps.
    pub fn span(&self) -> usize {
        self.dilation * (self.kernel_size - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.dilation == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv spec needs positive kernel, dilation and channels: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn conv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |n: usize| (n + 2 * self.padding).checked_sub(self.span()).filter(|&v| v > 0);
        match (f(h), f(w)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                "conv2d",
                format!("{h}x{w} input gives empty output for {self:?}"),
            )),
        }
    }

    pub fn deconv_output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = |n: usize| (n + self.span()).checked_sub(2 * self.padding).filter(|&v| v > 0);
        match (f(h), f(w)) {
            (Some(ho), Some(wo)) => Ok((ho, wo)),
            _ => Err(Error::shape(
                "deconv2d",
                format!("{h}x{w} input gives empty output for {self:?}"),
            )),
        }
    }

    /// `(out, in, k, k)`.
    pub fn conv_weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel_size, self.kernel_size]
    }

    /// `(in, out, k, k)`, the layout of the adjoint convolution's weights.
    pub fn deconv_weight_shape(&self) -> [usize; 4] {
        [self.in_channels, self.out_channels, self.kernel_size, self.kernel_size]
    }

    pub fn weight_count(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_size * self.kernel_size
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + if self.has_bias { self.out_channels } else { 0 }
    }

    /// Multiply-accumulates per output pixel.
    pub fn macs_per_pixel(&self) -> usize {
        self.weight_count()
    }
}

/// Both sides of the linear map `b = W * im2col(a)`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    ca: usize,
    ha: usize,
    wa: usize,
    cb: usize,
    hb: usize,
    wb: usize,
    k: usize,
    d: usize,
    p: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.ca * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.hb * self.wb
    }

    fn a_len(&self) -> usize {
        self.ca * self.ha * self.wa
    }

    fn b_len(&self) -> usize {
        self.cb * self.hb * self.wb
    }

    /// Source coordinate of tap `t` for output coordinate `o`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        (o + t * self.d).checked_sub(self.p).filter(|&v| v < limit)
    }

    fn im2col<T: Real>(&self, a: &[T], col: &mut [T]) {
        let l = self.cols();
        for c in 0..self.ca {
            let plane = &a[c * self.ha * self.wa..(c + 1) * self.ha * self.wa];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * l..(row + 1) * l];
                    for oy in 0..self.hb {
                        let line = &mut dst[oy * self.wb..(oy + 1) * self.wb];
                        match self.src(oy, ky, self.ha) {
                            None => line.fill(T::zero()),
                            Some(sy) => {
                                let srow = &plane[sy * self.wa..(sy + 1) * self.wa];
                                for (ox, v) in line.iter_mut().enumerate() {
                                    *v = match self.src(ox, kx, self.wa) {
                                        Some(sx) => srow[sx],
                                        None => T::zero(),
                                    };
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, col: &[T], a: &mut [T]) {
        let l = self.cols();
        for c in 0..self.ca {
            let plane = &mut a[c * self.ha * self.wa..(c + 1) * self.ha * self.wa];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * l..(row + 1) * l];
                    for oy in 0..self.hb {
                        let Some(sy) = self.src(oy, ky, self.ha) else {
                            continue;
                        };
                        let line = &src[oy * self.wb..(oy + 1) * self.wb];
                        let drow = &mut plane[sy * self.wa..(sy + 1) * self.wa];
                        for (ox, &v) in line.iter().enumerate() {
                            if let Some(sx) = self.src(ox, kx, self.wa) {
                                drow[sx] += v;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `b = W * im2col(a)` for one batch item; `w` is `(cb, ca*k*k)`.
    fn apply<T: Real>(&self, w: &[T], a: &[T], b: &mut [T]) {
        let (rows, cols) = (self.rows(), self.cols());
        let mut col = vec![T::zero(); rows * cols];
        self.im2col(a, &mut col);
        T::gemm(
            self.cb,
            rows,
            cols,
            w,
            (rows as isize, 1),
            &col,
            (cols as isize, 1),
            T::zero(),
            b,
            (cols as isize, 1),
        );
    }

    /// `a += col2im(W^T * b)` for one batch item.
    fn adjoint<T: Real>(&self, w: &[T], b: &[T], a: &mut [T]) {
        let (rows, cols) = (self.rows(), self.cols());
        let mut col = vec![T::zero(); rows * cols];
        T::gemm(
            rows,
            self.cb,
            cols,
            w,
            (1, rows as isize),
            b,
            (cols as isize, 1),
            T::zero(),
            &mut col,
            (cols as isize, 1),
        );
        self.col2im(&col, a);
    }

    /// `gw += g * im2col(a)^T` for one batch item.
    fn weight_grad<T: Real>(&self, a: &[T], g: &[T], gw: &mut [T]) {
        let (rows, cols) = (self.rows(), self.cols());
        let mut col = vec![T::zero(); rows * cols];
        self.im2col(a, &mut col);
        T::gemm(
            self.cb,
            cols,
            rows,
            g,
            (cols as isize, 1),
            &col,
            (1, cols as isize),
            T::one(),
            gw,
            (rows as isize, 1),
        );
    }
}

fn check_input<T: Real>(op: &'static str, x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.c() != channels {
        return Err(Error::shape(
            op,
            format!("input has {} channels, layer expects {channels}", x.c()),
        ));
    }
    Ok(())
}

fn check_weights<T: Real>(
    op: &'static str,
    w: &Tensor<T>,
    want: [usize; 4],
    b: Option<&Tensor<T>>,
    bias_len: usize,
) -> Result<()> {
    if w.shape() != want {
        return Err(Error::shape(op, format!("weights {:?}, expected {want:?}", w.shape())));
    }
    if let Some(b) = b {
        if b.len() != bias_len {
            return Err(Error::shape(
                op,
                format!("bias has {} values, expected {bias_len}", b.len()),
            ));
        }
    }
    Ok(())
}

fn conv_geometry<T: Real>(x: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (hb, wb) = spec.conv_output(x.h(), x.w())?;
    Ok(Geometry {
        ca: spec.in_channels,
        ha: x.h(),
        wa: x.w(),
        cb: spec.out_channels,
        hb,
        wb,
        k: spec.kernel_size,
        d: spec.dilation,
        p: spec.padding,
    })
}

fn deconv_geometry<T: Real>(y: &Tensor<T>, spec: &ConvSpec) -> Result<Geometry> {
    spec.validate()?;
    let (ha, wa) = spec.deconv_output(y.h(), y.w())?;
    Ok(Geometry {
        ca: spec.out_channels,
        ha,
        wa,
        cb: spec.in_channels,
        hb: y.h(),
        wb: y.w(),
        k: spec.kernel_size,
        d: spec.dilation,
        p: spec.padding,
    })
}

fn add_bias<T: Real>(out: &mut Tensor<T>, bias: &Tensor<T>) {
    let plane = out.plane_len();
    let c = out.c();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let b = bias.data()[i % c];
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let c = g.c();
    let mut out = vec![T::zero(); c];
    for (i, chunk) in g.data().chunks(g.plane_len()).enumerate() {
        out[i % c] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec([1, c, 1, 1], out).expect("bias length")
}

fn sum_partials<T: Real>(parts: Vec<Vec<T>>, shape: [usize; 4]) -> Tensor<T> {
    let mut acc = vec![T::zero(); crate::tensor::numel(shape)];
    for part in parts {
        for (a, b) in acc.iter_mut().zip(part) {
            *a += b;
        }
    }
    Tensor::from_vec(shape, acc).expect("partial length")
}

/// Cross-correlation with dilation and zero padding (no kernel flip).
pub fn conv2d<T: Real>(x: &Tensor<T>, spec: &ConvSpec, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_input("conv2d", x, spec.in_channels)?;
    check_weights("conv2d", w, spec.conv_weight_shape(), b, spec.out_channels)?;
    let g = conv_geometry(x, spec)?;
    let mut out = Tensor::zeros([x.n(), g.cb, g.hb, g.wb]);
    out.data_mut()
        .par_chunks_mut(g.b_len())
        .zip(x.data().par_chunks(g.a_len()))
        .for_each(|(o, a)| g.apply(w.data(), a, o));
    if let Some(b) = b {
        add_bias(&mut out, b);
    }
    Ok(out)
}

/// `(d input, d weights, d bias)`, each present only when requested.
pub type BackwardParts<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`conv2d`]: `(d input, d weights, d bias)`.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<BackwardParts<T>> {
    let g = conv_geometry(x, spec)?;
    let gx = need[0].then(|| {
        let mut gx = Tensor::zeros(x.shape());
        gx.data_mut()
            .par_chunks_mut(g.a_len())
            .zip(grad_out.data().par_chunks(g.b_len()))
            .for_each(|(a, b)| g.adjoint(w.data(), b, a));
        gx
    });
    let gw = need[1].then(|| {
        let parts: Vec<Vec<T>> = x
            .data()
            .par_chunks(g.a_len())
            .zip(grad_out.data().par_chunks(g.b_len()))
            .map(|(a, b)| {
                let mut gw = vec![T::zero(); w.len()];
                g.weight_grad(a, b, &mut gw);
                gw
            })
            .collect();
        sum_partials(parts, w.shape())
    });
    let gb = need[2].then(|| bias_grad(grad_out));
    Ok((gx, gw, gb))
}

/// Transposed convolution: the adjoint of [`conv2d`] with input/output
/// channels swapped. Weights are `(in, out, k, k)`.
pub fn deconv2d<T: Real>(y: &Tensor<T>, spec: &ConvSpec, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    check_input("deconv2d", y, spec.in_channels)?;
    check_weights("deconv2d", w, spec.deconv_weight_shape(), b, spec.out_channels)?;
    let g = deconv_geometry(y, spec)?;
    let mut out = Tensor::zeros([y.n(), g.ca, g.ha, g.wa]);
    out.data_mut()
        .par_chunks_mut(g.a_len())
        .zip(y.data().par_chunks(g.b_len()))
        .for_each(|(a, b)| g.adjoint(w.data(), b, a));
    if let Some(b) = b {
        add_bias(&mut out, b);
    }
    Ok(out)
}

/// Gradients of [`deconv2d`]: `(d input, d weights, d bias)`.
pub fn deconv2d_backward<T: Real>(
    y: &Tensor<T>,
    spec: &ConvSpec,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<BackwardParts<T>> {
    let g = deconv_geometry(y, spec)?;
    let gy = need[0].then(|| {
        let mut gy = Tensor::zeros(y.shape());
        gy.data_mut()
            .par_chunks_mut(g.b_len())
            .zip(grad_out.data().par_chunks(g.a_len()))
            .for_each(|(b, a)| g.apply(w.data(), a, b));
        gy
    });
    let gw = need[1].then(|| {
        let parts: Vec<Vec<T>> = grad_out
            .data()
            .par_chunks(g.a_len())
            .zip(y.data().par_chunks(g.b_len()))
            .map(|(a, b)| {
                let mut gw = vec![T::zero(); w.len()];
                g.weight_grad(a, b, &mut gw);
                gw
            })
            .collect();
        sum_partials(parts, w.shape())
    });
    let gb = need[2].then(|| bias_grad(grad_out));
    Ok((gy, gw, gb))
}

/// Geometry of a per-channel (depthwise) convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DepthwiseSpec {
    pub kernel_size: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl DepthwiseSpec {
    pub fn same(kernel_size: usize, dilation: usize) -> Self {
        Self {
            kernel_size,
            dilation,
            padding: dilation * (kernel_size - 1) / 2,
        }
    }

    fn output(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        ConvSpec {
            in_channels: 1,
            out_channels: 1,
            kernel_size: self.kernel_size,
            dilation: self.dilation,
            padding: self.padding,
            has_bias: false,
        }
        .conv_output(h, w)
    }
}

fn depthwise_check<T: Real>(
    x: &Tensor<T>,
    spec: &DepthwiseSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<(usize, usize)> {
    let k = spec.kernel_size;
    if k == 0 || spec.dilation == 0 {
        return Err(Error::InvalidArgument(format!("bad depthwise spec {spec:?}")));
    }
    check_weights("depthwise_conv2d", w, [x.c(), 1, k, k], b, x.c())?;
    spec.output(x.h(), x.w())
}

/// Each channel convolved with its own `k x k` kernel; weights `(c, 1, k, k)`.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    spec: &DepthwiseSpec,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (ho, wo) = depthwise_check(x, spec, w, b)?;
    let (k, d, p) = (spec.kernel_size, spec.dilation, spec.padding);
    let (h, wd, c) = (x.h(), x.w(), x.c());
    let mut out = Tensor::zeros([x.n(), c, ho, wo]);
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .zip(x.data().par_chunks(h * wd))
        .enumerate()
        .for_each(|(i, (o, src))| {
            let ch = i % c;
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            let bias = b.map_or(T::zero(), |b| b.data()[ch]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias;
                    for ky in 0..k {
                        let Some(sy) = (oy + ky * d).checked_sub(p).filter(|&v| v < h) else {
                            continue;
                        };
                        for kx in 0..k {
                            if let Some(sx) = (ox + kx * d).checked_sub(p).filter(|&v| v < wd) {
                                acc += kern[ky * k + kx] * src[sy * wd + sx];
                            }
                        }
                    }
                    o[oy * wo + ox] = acc;
                }
            }
        });
    Ok(out)
}

/// Gradients of [`depthwise_conv2d`]: `(d input, d weights, d bias)`.
pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    spec: &DepthwiseSpec,
    w: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> Result<BackwardParts<T>> {
    let (ho, wo) = depthwise_check(x, spec, w, None)?;
    let (k, d, p) = (spec.kernel_size, spec.dilation, spec.padding);
    let (h, wd, c) = (x.h(), x.w(), x.c());
    let mut gx = need[0].then(|| Tensor::zeros(x.shape()));
    let mut gw = need[1].then(|| Tensor::zeros(w.shape()));
    for n in 0..x.n() {
        for ch in 0..c {
            let src = x.plane(n, ch);
            let g = grad_out.plane(n, ch);
            let kern = &w.data()[ch * k * k..(ch + 1) * k * k];
            for oy in 0..ho {
                for ky in 0..k {
                    let Some(sy) = (oy + ky * d).checked_sub(p).filter(|&v| v < h) else {
                        continue;
                    };
                    for ox in 0..wo {
                        let go = g[oy * wo + ox];
                        for kx in 0..k {
                            if let Some(sx) = (ox + kx * d).checked_sub(p).filter(|&v| v < wd) {
                                if let Some(gx) = gx.as_mut() {
                                    gx.plane_mut(n, ch)[sy * wd + sx] += kern[ky * k + kx] * go;
                                }
                                if let Some(gw) = gw.as_mut() {
                                    gw.data_mut()[ch * k * k + ky * k + kx] += src[sy * wd + sx] * go;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let gb = need[2].then(|| bias_grad(grad_out));
    Ok((gx, gw, gb))
}

/// Depth-to-space: `(n, c*s*s, h, w) -> (n, c, h*s, w*s)`.
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 || !x.c().is_multiple_of(s * s) {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{} channels not divisible by {s}^2", x.c()),
        ));
    }
    let [n, cin, h, w] = x.shape();
    let c = cin / (s * s);
    Ok(Tensor::from_fn([n, c, h * s, w * s], |[b, ch, y, xx]| {
        x.at(b, ch * s * s + (y % s) * s + xx % s, y / s, xx / s)
    }))
}

/// Space-to-depth, the inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    if s == 0 || !x.h().is_multiple_of(s) || !x.w().is_multiple_of(s) {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{}x{} not divisible by {s}", x.h(), x.w()),
        ));
    }
    let [n, c, h, w] = x.shape();
    Ok(Tensor::from_fn([n, c * s * s, h / s, w / s], |[b, ch, y, xx]| {
        let (base, r) = (ch / (s * s), ch % (s * s));
        x.at(b, base, y * s + r / s, xx * s + r % s)
    }))
}
