//! Convolution layers: 2D, 3D, and transposed 3D.
//!
//! All three lower the spatial windows to a column matrix and run a single
//! matrix product per sample (im2col / vol2col). Backward passes recompute
//! the columns instead of caching them; at the sizes used here that is far
//! cheaper than holding the lowered input for every layer.

use ndarray::{Array2, Array4, Array5, ArrayView3, ArrayView4, Ix1, Ix4, Ix5};
use rand::Rng;

use super::{init_uniform, Module, Param, ParamViewMut};

/// Output length of a convolution along one axis.
fn conv_len(size: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(
        size + 2 * p >= k,
        "window {k} larger than padded input {}",
        size + 2 * p
    );
    (size + 2 * p - k) / s + 1
}

/// Output length of a transposed convolution along one axis.
fn deconv_len(size: usize, k: usize, s: usize, p: usize) -> usize {
    let grown = (size - 1) * s + k;
    assert!(grown > 2 * p, "padding {p} swallows the whole output");
    grown - 2 * p
}

/// Lowers `x: [C, H, W]` to `[C*k*k, len(pos)]` where column `(oh, ow)` holds
/// the window rooted at `(oh*s - p, ow*s - p)`; out-of-bounds cells are 0.
fn im2col(x: ArrayView3<f64>, k: usize, s: usize, p: usize, pos: (usize, usize)) -> Array2<f64> {
    let (c_in, h, w) = x.dim();
    let (ph, pw) = pos;
    let mut cols = Array2::zeros((c_in * k * k, ph * pw));
    for c in 0..c_in {
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                for oh in 0..ph {
                    let ih = (oh * s + a) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..pw {
                        let iw = (ow * s + b) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[[row, oh * pw + ow]] = x[[c, ih as usize, iw as usize]];
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`im2col`].
fn col2im(
    cols: &Array2<f64>,
    shape: (usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    pos: (usize, usize),
) -> ndarray::Array3<f64> {
    let (c_in, h, w) = shape;
    let (ph, pw) = pos;
    let mut x = ndarray::Array3::zeros(shape);
    for c in 0..c_in {
        for a in 0..k {
            for b in 0..k {
                let row = (c * k + a) * k + b;
                for oh in 0..ph {
                    let ih = (oh * s + a) as isize - p as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for ow in 0..pw {
                        let iw = (ow * s + b) as isize - p as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        x[[c, ih as usize, iw as usize]] += cols[[row, oh * pw + ow]];
                    }
                }
            }
        }
    }
    x
}

/// 3D analogue of [`im2col`] over `x: [C, D, H, W]`.
fn vol2col(
    x: ArrayView4<f64>,
    k: usize,
    s: usize,
    p: usize,
    pos: (usize, usize, usize),
) -> Array2<f64> {
    let (c_in, d, h, w) = x.dim();
    let (pd, ph, pw) = pos;
    let mut cols = Array2::zeros((c_in * k * k * k, pd * ph * pw));
    for c in 0..c_in {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    for od in 0..pd {
                        let id = (od * s + a) as isize - p as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ph {
                            let ih = (oh * s + b) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..pw {
                                let iw = (ow * s + e) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                cols[[row, (od * ph + oh) * pw + ow]] =
                                    x[[c, id as usize, ih as usize, iw as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add inverse of [`vol2col`].
fn col2vol(
    cols: &Array2<f64>,
    shape: (usize, usize, usize, usize),
    k: usize,
    s: usize,
    p: usize,
    pos: (usize, usize, usize),
) -> Array4<f64> {
    let (c_in, d, h, w) = shape;
    let (pd, ph, pw) = pos;
    let mut x = Array4::zeros(shape);
    for c in 0..c_in {
        for a in 0..k {
            for b in 0..k {
                for e in 0..k {
                    let row = ((c * k + a) * k + b) * k + e;
                    for od in 0..pd {
                        let id = (od * s + a) as isize - p as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        for oh in 0..ph {
                            let ih = (oh * s + b) as isize - p as isize;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            for ow in 0..pw {
                                let iw = (ow * s + e) as isize - p as isize;
                                if iw < 0 || iw >= w as isize {
                                    continue;
                                }
                                x[[c, id as usize, ih as usize, iw as usize]] +=
                                    cols[[row, (od * ph + oh) * pw + ow]];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2D convolution over `[B, C, H, W]` input, square kernel.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param<Ix4>,
    pub b: Param<Ix1>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        Conv2d {
            w: Param::new(init_uniform(Ix4(c_out, c_in, kernel, kernel), fan_in, rng)),
            b: Param::new(init_uniform(Ix1(c_out), fan_in, rng)),
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        conv_len(size, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, x: &Array4<f64>) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        let (c_out, wc_in, _, _) = self.w.value.dim();
        assert_eq!(c_in, wc_in, "conv2d expects {wc_in} channels, got {c_in}");
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let ck = c_in * self.kernel * self.kernel;
        let w2 = self.w.value.view().into_shape_with_order((c_out, ck)).unwrap();
        let mut out = Array4::zeros((batch, c_out, ho, wo));
        for bi in 0..batch {
            let cols = im2col(x.index_axis(ndarray::Axis(0), bi), self.kernel, self.stride, self.padding, (ho, wo));
            let mut y = w2.dot(&cols);
            for (ci, mut row) in y.rows_mut().into_iter().enumerate() {
                row += self.b.value[ci];
            }
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&y.into_shape_with_order((c_out, ho, wo)).unwrap());
        }
        out
    }

    /// Accumulates weight/bias gradients, returns the input gradient.
    pub fn backward(&mut self, grad_out: &Array4<f64>, x: &Array4<f64>) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        let (c_out, _, _, _) = self.w.value.dim();
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        let ck = c_in * self.kernel * self.kernel;
        let w2 = self.w.value.view().into_shape_with_order((c_out, ck)).unwrap();
        let mut dx = Array4::zeros(x.raw_dim());
        for bi in 0..batch {
            let g = grad_out
                .index_axis(ndarray::Axis(0), bi)
                .into_shape_with_order((c_out, ho * wo))
                .unwrap();
            let cols = im2col(x.index_axis(ndarray::Axis(0), bi), self.kernel, self.stride, self.padding, (ho, wo));
            {
                let mut dw2 = self
                    .w
                    .grad
                    .view_mut()
                    .into_shape_with_order((c_out, ck))
                    .unwrap();
                dw2 += &g.dot(&cols.t());
            }
            for ci in 0..c_out {
                self.b.grad[ci] += g.row(ci).sum();
            }
            let dcols = w2.t().dot(&g);
            dx.index_axis_mut(ndarray::Axis(0), bi).assign(&col2im(
                &dcols,
                (c_in, h, w),
                self.kernel,
                self.stride,
                self.padding,
                (ho, wo),
            ));
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("w", self.w.view_mut());
        f("b", self.b.view_mut());
    }
}

/// 3D convolution over `[B, C, D, H, W]` input, cubic kernel.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param<Ix5>,
    pub b: Param<Ix1>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel * kernel;
        Conv3d {
            w: Param::new(init_uniform(
                Ix5(c_out, c_in, kernel, kernel, kernel),
                fan_in,
                rng,
            )),
            b: Param::new(init_uniform(Ix1(c_out), fan_in, rng)),
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        conv_len(size, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, x: &Array5<f64>) -> Array5<f64> {
        let (batch, c_in, d, h, w) = x.dim();
        let (c_out, wc_in, ..) = self.w.value.dim();
        assert_eq!(c_in, wc_in, "conv3d expects {wc_in} channels, got {c_in}");
        let (od, oh, ow) = (self.out_size(d), self.out_size(h), self.out_size(w));
        let ck = c_in * self.kernel.pow(3);
        let w2 = self.w.value.view().into_shape_with_order((c_out, ck)).unwrap();
        let mut out = Array5::zeros((batch, c_out, od, oh, ow));
        for bi in 0..batch {
            let cols = vol2col(x.index_axis(ndarray::Axis(0), bi), self.kernel, self.stride, self.padding, (od, oh, ow));
            let mut y = w2.dot(&cols);
            for (ci, mut row) in y.rows_mut().into_iter().enumerate() {
                row += self.b.value[ci];
            }
            out.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&y.into_shape_with_order((c_out, od, oh, ow)).unwrap());
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array5<f64>, x: &Array5<f64>) -> Array5<f64> {
        let (batch, c_in, d, h, w) = x.dim();
        let (c_out, ..) = self.w.value.dim();
        let (od, oh, ow) = (self.out_size(d), self.out_size(h), self.out_size(w));
        let ck = c_in * self.kernel.pow(3);
        let w2 = self.w.value.view().into_shape_with_order((c_out, ck)).unwrap();
        let mut dx = Array5::zeros(x.raw_dim());
        for bi in 0..batch {
            let g = grad_out
                .index_axis(ndarray::Axis(0), bi)
                .into_shape_with_order((c_out, od * oh * ow))
                .unwrap();
            let cols = vol2col(x.index_axis(ndarray::Axis(0), bi), self.kernel, self.stride, self.padding, (od, oh, ow));
            {
                let mut dw2 = self
                    .w
                    .grad
                    .view_mut()
                    .into_shape_with_order((c_out, ck))
                    .unwrap();
                dw2 += &g.dot(&cols.t());
            }
            for ci in 0..c_out {
                self.b.grad[ci] += g.row(ci).sum();
            }
            let dcols = w2.t().dot(&g);
            dx.index_axis_mut(ndarray::Axis(0), bi).assign(&col2vol(
                &dcols,
                (c_in, d, h, w),
                self.kernel,
                self.stride,
                self.padding,
                (od, oh, ow),
            ));
        }
        dx
    }
}

impl Module for Conv3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("w", self.w.view_mut());
        f("b", self.b.view_mut());
    }
}

/// Transposed 3D convolution (fractionally strided). Weight layout is
/// `[c_in, c_out, k, k, k]`; output size along each axis is
/// `(in - 1) * stride + kernel - 2 * padding`.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub w: Param<Ix5>,
    pub b: Param<Ix1>,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose3d {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        // Each output cell receives at most ceil(k/s)^3 * c_in contributions.
        let fan_in = c_in * kernel.div_ceil(stride).pow(3);
        ConvTranspose3d {
            w: Param::new(init_uniform(
                Ix5(c_in, c_out, kernel, kernel, kernel),
                fan_in,
                rng,
            )),
            b: Param::new(init_uniform(Ix1(c_out), fan_in, rng)),
            kernel,
            stride,
            padding,
        }
    }

    pub fn out_size(&self, size: usize) -> usize {
        deconv_len(size, self.kernel, self.stride, self.padding)
    }

    pub fn forward(&self, x: &Array5<f64>) -> Array5<f64> {
        let (batch, c_in, d, h, w) = x.dim();
        let (wc_in, c_out, ..) = self.w.value.dim();
        assert_eq!(c_in, wc_in, "deconv3d expects {wc_in} channels, got {c_in}");
        let (od, oh, ow) = (self.out_size(d), self.out_size(h), self.out_size(w));
        let ck = c_out * self.kernel.pow(3);
        // wr: [c_in, c_out*k^3]; columns indexed by input positions.
        let wr = self.w.value.view().into_shape_with_order((c_in, ck)).unwrap();
        let mut out = Array5::zeros((batch, c_out, od, oh, ow));
        for bi in 0..batch {
            let x_flat = x
                .index_axis(ndarray::Axis(0), bi)
                .into_shape_with_order((c_in, d * h * w))
                .unwrap();
            let cols = wr.t().dot(&x_flat);
            let mut y = col2vol(
                &cols,
                (c_out, od, oh, ow),
                self.kernel,
                self.stride,
                self.padding,
                (d, h, w),
            );
            for (ci, mut chan) in y.outer_iter_mut().enumerate() {
                chan += self.b.value[ci];
            }
            out.index_axis_mut(ndarray::Axis(0), bi).assign(&y);
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array5<f64>, x: &Array5<f64>) -> Array5<f64> {
        let (batch, c_in, d, h, w) = x.dim();
        let (_, c_out, ..) = self.w.value.dim();
        let ck = c_out * self.kernel.pow(3);
        let wr = self.w.value.view().into_shape_with_order((c_in, ck)).unwrap();
        let mut dx = Array5::zeros(x.raw_dim());
        for bi in 0..batch {
            let g_vol = grad_out.index_axis(ndarray::Axis(0), bi);
            // Gather: dcols[(co, a, b, e), input pos] = g_out at the cell the
            // forward scatter wrote to.
            let dcols = vol2col(g_vol, self.kernel, self.stride, self.padding, (d, h, w));
            let x_flat = x
                .index_axis(ndarray::Axis(0), bi)
                .into_shape_with_order((c_in, d * h * w))
                .unwrap();
            {
                let mut dwr = self
                    .w
                    .grad
                    .view_mut()
                    .into_shape_with_order((c_in, ck))
                    .unwrap();
                dwr += &x_flat.dot(&dcols.t());
            }
            for ci in 0..c_out {
                self.b.grad[ci] += g_vol.index_axis(ndarray::Axis(0), ci).sum();
            }
            let dxf = wr.dot(&dcols);
            dx.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&dxf.into_shape_with_order((c_in, d, h, w)).unwrap());
        }
        dx
    }
}

impl Module for ConvTranspose3d {
    fn visit_params(&mut self, f: &mut dyn FnMut(&str, ParamViewMut<'_>)) {
        f("w", self.w.view_mut());
        f("b", self.b.view_mut());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use ndarray::Array3;

    fn rand4(rng: &mut impl Rng, dim: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn rand5(rng: &mut impl Rng, dim: (usize, usize, usize, usize, usize)) -> Array5<f64> {
        Array5::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0)
    }

    /// Direct-definition convolution: loop over output cells and windows.
    fn conv2d_oracle(x: &Array4<f64>, l: &Conv2d) -> Array4<f64> {
        let (batch, c_in, h, w) = x.dim();
        let (c_out, _, k, _) = l.w.value.dim();
        let (ho, wo) = (l.out_size(h), l.out_size(w));
        let mut out = Array4::zeros((batch, c_out, ho, wo));
        for bi in 0..batch {
            for co in 0..c_out {
                for ohh in 0..ho {
                    for oww in 0..wo {
                        let mut acc = l.b.value[co];
                        for ci in 0..c_in {
                            for a in 0..k {
                                for bb in 0..k {
                                    let ih = (ohh * l.stride + a) as isize - l.padding as isize;
                                    let iw = (oww * l.stride + bb) as isize - l.padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        acc += x[[bi, ci, ih as usize, iw as usize]]
                                            * l.w.value[[co, ci, a, bb]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, ohh, oww]] = acc;
                    }
                }
            }
        }
        out
    }

    /// Direct-definition transposed convolution: scatter every input cell.
    fn deconv3d_oracle(x: &Array5<f64>, l: &ConvTranspose3d) -> Array5<f64> {
        let (batch, c_in, d, h, w) = x.dim();
        let (_, c_out, k, _, _) = l.w.value.dim();
        let (od, oh, ow) = (l.out_size(d), l.out_size(h), l.out_size(w));
        let mut out = Array5::zeros((batch, c_out, od, oh, ow));
        for bi in 0..batch {
            for co in 0..c_out {
                for dd in 0..od {
                    for hh in 0..oh {
                        for ww in 0..ow {
                            out[[bi, co, dd, hh, ww]] = l.b.value[co];
                        }
                    }
                }
            }
            for ci in 0..c_in {
                for co in 0..c_out {
                    for id in 0..d {
                        for ih in 0..h {
                            for iw in 0..w {
                                for a in 0..k {
                                    for bb in 0..k {
                                        for e in 0..k {
                                            let odi =
                                                (id * l.stride + a) as isize - l.padding as isize;
                                            let ohi =
                                                (ih * l.stride + bb) as isize - l.padding as isize;
                                            let owi =
                                                (iw * l.stride + e) as isize - l.padding as isize;
                                            if odi >= 0
                                                && ohi >= 0
                                                && owi >= 0
                                                && (odi as usize) < od
                                                && (ohi as usize) < oh
                                                && (owi as usize) < ow
                                            {
                                                out[[
                                                    bi,
                                                    co,
                                                    odi as usize,
                                                    ohi as usize,
                                                    owi as usize,
                                                ]] += x[[bi, ci, id, ih, iw]]
                                                    * l.w.value[[ci, co, a, bb, e]];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for random x, c: the scatter is
        // the exact transpose of the gather.
        let mut rng = crate::test_rng(51);
        let x = Array3::from_shape_fn((2, 5, 5), |_| rng.random::<f64>());
        let cols = im2col(x.view(), 3, 2, 1, (3, 3));
        let c = Array2::from_shape_fn(cols.dim(), |_| rng.random::<f64>());
        let lhs: f64 = (&cols * &c).sum();
        let back = col2im(&c, (2, 5, 5), 3, 2, 1, (3, 3));
        let rhs: f64 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv2d_matches_direct_loop() {
        let mut rng = crate::test_rng(52);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let l = Conv2d::new(2, 3, 3, stride, padding, &mut rng);
            let x = rand4(&mut rng, (2, 2, 6, 6));
            let fast = l.forward(&x);
            let slow = conv2d_oracle(&x, &l);
            let diff = (&fast - &slow).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "stride {stride} padding {padding}: {diff}");
        }
    }

    #[test]
    fn conv3d_matches_conv2d_on_flat_volume() {
        // A depth-1 volume with a kernel spanning the full depth reduces to a
        // 2D convolution with the matching kernel slice.
        let mut rng = crate::test_rng(53);
        let l3 = Conv3d::new(1, 2, 3, 1, 0, &mut rng);
        let mut l2 = Conv2d::new(1, 2, 3, 1, 0, &mut rng);
        // Copy the central depth slice path: with input depth 3 and no
        // padding, output depth is 1 and each kernel depth slice hits one
        // input slice. Build x constant over depth so conv3d equals conv2d
        // with the depth-summed kernel.
        for co in 0..2 {
            for a in 0..3 {
                for b in 0..3 {
                    l2.w.value[[co, 0, a, b]] =
                        (0..3).map(|e| l3.w.value[[co, 0, e, a, b]]).sum();
                }
            }
            l2.b.value[co] = l3.b.value[co];
        }
        let slice = Array2::from_shape_fn((6, 6), |_| rng.random::<f64>());
        let mut x3 = Array5::zeros((1, 1, 3, 6, 6));
        for e in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    x3[[0, 0, e, i, j]] = slice[[i, j]];
                }
            }
        }
        let mut x2 = Array4::zeros((1, 1, 6, 6));
        x2.index_axis_mut(ndarray::Axis(1), 0)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(&slice);
        let y3 = l3.forward(&x3);
        let y2 = l2.forward(&x2);
        for co in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    assert!((y3[[0, co, 0, i, j]] - y2[[0, co, i, j]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn deconv3d_matches_direct_scatter() {
        let mut rng = crate::test_rng(54);
        for (k, stride, padding) in [(4, 2, 1), (3, 1, 1), (2, 2, 0)] {
            let l = ConvTranspose3d::new(2, 3, k, stride, padding, &mut rng);
            let x = rand5(&mut rng, (2, 2, 3, 3, 3));
            let fast = l.forward(&x);
            let slow = deconv3d_oracle(&x, &l);
            let diff = (&fast - &slow).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "k {k} stride {stride} padding {padding}: {diff}");
        }
    }

    #[test]
    fn deconv_doubles_resolution_with_k4_s2_p1() {
        let mut rng = crate::test_rng(55);
        let l = ConvTranspose3d::new(1, 1, 4, 2, 1, &mut rng);
        assert_eq!(l.out_size(1), 2);
        assert_eq!(l.out_size(4), 8);
        assert_eq!(l.out_size(16), 32);
    }

    #[test]
    fn conv2d_gradient_check() {
        let mut rng = crate::test_rng(56);
        let x = rand4(&mut rng, (2, 2, 5, 5));
        let mut l = Conv2d::new(2, 3, 3, 2, 1, &mut rng);
        let loss = move |m: &mut Conv2d| {
            let y = m.forward(&x);
            let n = y.len() as f64;
            // Loss: mean of y^2; dL/dy = 2y/n.
            let g = y.mapv(|v| 2.0 * v / n);
            m.backward(&g, &x);
            y.iter().map(|v| v * v).sum::<f64>() / n
        };
        check_gradients(&mut l, loss, 6, 57).assert_below(1e-3);
    }

    #[test]
    fn conv3d_gradient_check() {
        let mut rng = crate::test_rng(58);
        let x = rand5(&mut rng, (2, 2, 4, 4, 4));
        let mut l = Conv3d::new(2, 2, 3, 1, 1, &mut rng);
        let loss = move |m: &mut Conv3d| {
            let y = m.forward(&x);
            let n = y.len() as f64;
            let g = y.mapv(|v| 2.0 * v / n);
            m.backward(&g, &x);
            y.iter().map(|v| v * v).sum::<f64>() / n
        };
        check_gradients(&mut l, loss, 6, 59).assert_below(1e-3);
    }

    #[test]
    fn deconv3d_gradient_check() {
        let mut rng = crate::test_rng(60);
        let x = rand5(&mut rng, (2, 3, 2, 2, 2));
        let mut l = ConvTranspose3d::new(3, 2, 4, 2, 1, &mut rng);
        let loss = move |m: &mut ConvTranspose3d| {
            let y = m.forward(&x);
            let n = y.len() as f64;
            let g = y.mapv(|v| 2.0 * v / n);
            m.backward(&g, &x);
            y.iter().map(|v| v * v).sum::<f64>() / n
        };
        check_gradients(&mut l, loss, 6, 61).assert_below(1e-3);
    }

    #[test]
    fn conv_input_gradient_check() {
        // Input gradients via finite differences on x rather than params.
        let mut rng = crate::test_rng(62);
        let x = rand4(&mut rng, (1, 2, 4, 4));
        let mut l = Conv2d::new(2, 2, 3, 1, 1, &mut rng);
        let loss_of = |l: &Conv2d, x: &Array4<f64>| {
            let y = l.forward(x);
            y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64
        };
        let y = l.forward(&x);
        let n = y.len() as f64;
        let dx = l.backward(&y.mapv(|v| 2.0 * v / n), &x);
        let h = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 1, 2, 3], [0, 0, 3, 1]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss_of(&l, &xp) - loss_of(&l, &xm)) / (2.0 * h);
            assert!(
                (dx[idx] - fd).abs() / fd.abs().max(1e-6) < 1e-4,
                "dx{idx:?}: analytic {} vs fd {fd}",
                dx[idx]
            );
        }
    }
}
