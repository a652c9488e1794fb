//! Direct and transposed 2-D convolution with explicit backward passes.
//!
//! Forward and backward are im2col/col2im plus one GEMM per (chunk, group).
//! Batches are processed in fixed [`BATCH_CHUNK`]-sample chunks in parallel;
//! per-chunk weight gradients are reduced in chunk order afterwards, keeping
//! results independent of thread scheduling.

use ndarray::{s, Array2, Array4, ArrayView4, ArrayViewMut4, Axis, Ix4};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::init::{he_normal, zeros};
use super::{batch_chunks, Layer, Param, Scalar, Tensor};

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    assert!(
        input + 2 * padding >= kernel,
        "kernel {kernel} larger than padded input {input}+2*{padding}"
    );
    (input + 2 * padding - kernel) / stride + 1
}

pub fn deconv_out_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input - 1) * stride + kernel - 2 * padding
}

/// Gathers sliding k x k windows of `x[.., c0..c1, .., ..]` into a matrix of
/// shape `[(c1-c0)*k*k, n*oh*ow]`. Column index is `(sample, oy, ox)`
/// row-major; positions outside the padded input contribute zero.
#[allow(clippy::too_many_arguments)]
fn im2col<A: Scalar>(
    x: &ArrayView4<A>,
    c0: usize,
    c1: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Array2<A> {
    let (n, _c, h, w) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
    );
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let (sh, sc, sy) = (x.shape()[1] * h * w, h * w, w);
    let ncols = n * oh * ow;
    let nrows = (c1 - c0) * k * k;
    let mut col = Array2::<A>::zeros((nrows, ncols));
    let cs = col.as_slice_mut().unwrap();

    for c in c0..c1 {
        for ky in 0..k {
            // valid oy range: 0 <= oy*stride + ky - padding < h
            let oy_lo = padding.saturating_sub(ky).div_ceil(stride).min(oh);
            let oy_hi = if h + padding > ky {
                (((h + padding - ky - 1) / stride) + 1).min(oh)
            } else {
                0
            };
            for kx in 0..k {
                let row = ((c - c0) * k + ky) * k + kx;
                let rbase = row * ncols;
                let ox_lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
                let ox_hi = if w + padding > kx {
                    (((w + padding - kx - 1) / stride) + 1).min(ow)
                } else {
                    0
                };
                for b in 0..n {
                    let xbase = b * sh + c * sc;
                    let cbase = rbase + b * oh * ow;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let xrow = xbase + iy * sy;
                        let crow = cbase + oy * ow;
                        if stride == 1 {
                            let ix0 = ox_lo + kx - padding;
                            cs[crow + ox_lo..crow + ox_hi]
                                .copy_from_slice(&xs[xrow + ix0..xrow + ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for ox in ox_lo..ox_hi {
                                cs[crow + ox] = xs[xrow + ox * stride + kx - padding];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Inverse of [`im2col`]: scatter-adds matrix columns back onto the spatial
/// grid `out[.., c0..c1, .., ..]` of shape `[n, c, h, w]`.
#[allow(clippy::too_many_arguments)]
fn col2im<A: Scalar>(
    col: &Array2<A>,
    out: &mut ArrayViewMut4<A>,
    c0: usize,
    c1: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) {
    let (n, _c, h, w) = (
        out.shape()[0],
        out.shape()[1],
        out.shape()[2],
        out.shape()[3],
    );
    let (sh, sc, sy) = (out.shape()[1] * h * w, h * w, w);
    let os = out.as_slice_mut().expect("col2im target must be standard layout");
    let ncols = n * oh * ow;
    let cslice = col.as_slice().unwrap();

    for c in c0..c1 {
        for ky in 0..k {
            let oy_lo = padding.saturating_sub(ky).div_ceil(stride).min(oh);
            let oy_hi = if h + padding > ky {
                (((h + padding - ky - 1) / stride) + 1).min(oh)
            } else {
                0
            };
            for kx in 0..k {
                let row = ((c - c0) * k + ky) * k + kx;
                let rbase = row * ncols;
                let ox_lo = padding.saturating_sub(kx).div_ceil(stride).min(ow);
                let ox_hi = if w + padding > kx {
                    (((w + padding - kx - 1) / stride) + 1).min(ow)
                } else {
                    0
                };
                for b in 0..n {
                    let obase = b * sh + c * sc;
                    let cbase = rbase + b * oh * ow;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - padding;
                        let orow = obase + iy * sy;
                        let crow = cbase + oy * ow;
                        for ox in ox_lo..ox_hi {
                            os[orow + ox * stride + kx - padding] += cslice[crow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Copies `src[.., c0..c1, .., ..]` (shape `[n, c, oh, ow]`) into a matrix
/// `[(c1-c0), n*oh*ow]` with the same column indexing as [`im2col`].
fn channels_to_mat<A: Scalar>(src: &ArrayView4<A>, c0: usize, c1: usize) -> Array2<A> {
    let (n, _c, oh, ow) = (
        src.shape()[0],
        src.shape()[1],
        src.shape()[2],
        src.shape()[3],
    );
    let l = oh * ow;
    let mut mat = Array2::<A>::zeros((c1 - c0, n * l));
    for c in c0..c1 {
        for b in 0..n {
            let win = src.slice(s![b, c, .., ..]);
            let mut dst = mat.slice_mut(s![c - c0, b * l..(b + 1) * l]);
            dst.assign(&win.to_shape(l).unwrap());
        }
    }
    mat
}

/// Scatters a `[(c1-c0), n*oh*ow]` matrix back to `dst[.., c0..c1, .., ..]`.
fn mat_to_channels<A: Scalar>(mat: &Array2<A>, dst: &mut ArrayViewMut4<A>, c0: usize, c1: usize) {
    let (n, _c, oh, ow) = (
        dst.shape()[0],
        dst.shape()[1],
        dst.shape()[2],
        dst.shape()[3],
    );
    let l = oh * ow;
    for c in c0..c1 {
        for b in 0..n {
            let src = mat.slice(s![c - c0, b * l..(b + 1) * l]);
            let mut win = dst.slice_mut(s![b, c, .., ..]);
            win.assign(&src.to_shape((oh, ow)).unwrap());
        }
    }
}

/// 2-D convolution layer (optionally grouped / strided / padded).
///
/// Weight layout `[c_out, c_in/groups, k, k]`, bias `[c_out]`.
pub struct Conv2d<A: Scalar> {
    pub weight: Param<A>,
    pub bias: Option<Param<A>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    cache_x: Option<Tensor<A>>,
}

impl<A: Scalar> Conv2d<A> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(c_in % groups == 0 && c_out % groups == 0, "channels not divisible by groups");
        let fan_in = (c_in / groups) * kernel * kernel;
        let weight = Param::new(he_normal(&[c_out, c_in / groups, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| Param::new(zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            padding,
            groups,
            c_in,
            c_out,
            kernel,
            cache_x: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }

    fn run_forward(&self, x: &ArrayView4<A>) -> Array4<A> {
        let (b, c, h, w) = x.dim();
        assert_eq!(c, self.c_in, "conv input channel mismatch");
        let (k, s, p, g) = (self.kernel, self.stride, self.padding, self.groups);
        let oh = conv_out_size(h, k, s, p);
        let ow = conv_out_size(w, k, s, p);
        let cig = self.c_in / g;
        let cog = self.c_out / g;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, cig * k * k))
            .unwrap();

        let mut y = Array4::<A>::zeros((b, self.c_out, oh, ow));
        let chunks = batch_chunks(b);
        let pieces: Vec<(usize, Array4<A>)> = chunks
            .par_iter()
            .map(|&(b0, b1)| {
                let xc = x.slice(s![b0..b1, .., .., ..]);
                let n = b1 - b0;
                let mut yc = Array4::<A>::zeros((n, self.c_out, oh, ow));
                for gi in 0..g {
                    let col = im2col(&xc, gi * cig, (gi + 1) * cig, k, s, p, oh, ow);
                    let wg = wmat.slice(s![gi * cog..(gi + 1) * cog, ..]);
                    let ymat = wg.dot(&col);
                    mat_to_channels(&ymat, &mut yc.view_mut(), gi * cog, (gi + 1) * cog);
                }
                (b0, yc)
            })
            .collect();
        for (b0, yc) in pieces {
            let n = yc.shape()[0];
            y.slice_mut(s![b0..b0 + n, .., .., ..]).assign(&yc);
        }
        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for co in 0..self.c_out {
                y.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bv[co]);
            }
        }
        y
    }
}

impl<A: Scalar> Layer<A> for Conv2d<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("conv expects [b,c,h,w]");
        let y = self.run_forward(&x4);
        if train {
            self.cache_x = Some(x.clone());
        }
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let x = self
            .cache_x
            .take()
            .expect("conv backward without cached forward")
            .into_dimensionality::<Ix4>()
            .unwrap();
        let dy = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (b, _c, h, w) = x.dim();
        let (k, s, p, g) = (self.kernel, self.stride, self.padding, self.groups);
        let (oh, ow) = (dy.shape()[2], dy.shape()[3]);
        let cig = self.c_in / g;
        let cog = self.c_out / g;
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_out, cig * k * k))
            .unwrap();

        let chunks = batch_chunks(b);
        let pieces: Vec<(usize, Array4<A>, Array2<A>)> = chunks
            .par_iter()
            .map(|&(b0, b1)| {
                let xc = x.slice(s![b0..b1, .., .., ..]);
                let dyc = dy.slice(s![b0..b1, .., .., ..]);
                let n = b1 - b0;
                let mut dxc = Array4::<A>::zeros((n, self.c_in, h, w));
                let mut dw = Array2::<A>::zeros((self.c_out, cig * k * k));
                for gi in 0..g {
                    let dymat = channels_to_mat(&dyc, gi * cog, (gi + 1) * cog);
                    let col = im2col(&xc, gi * cig, (gi + 1) * cig, k, s, p, oh, ow);
                    dw.slice_mut(s![gi * cog..(gi + 1) * cog, ..])
                        .assign(&dymat.dot(&col.t()));
                    let wg = wmat.slice(s![gi * cog..(gi + 1) * cog, ..]);
                    let dcol = wg.t().dot(&dymat);
                    col2im(&dcol, &mut dxc.view_mut(), gi * cig, (gi + 1) * cig, k, s, p, oh, ow);
                }
                (b0, dxc, dw)
            })
            .collect();

        let mut dx = Array4::<A>::zeros(x.dim());
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((self.c_out, cig * k * k))
            .unwrap();
        for (b0, dxc, dw) in pieces {
            let n = dxc.shape()[0];
            dx.slice_mut(s![b0..b0 + n, .., .., ..]).assign(&dxc);
            wgrad += &dw;
        }
        if let Some(bias) = &mut self.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let mut bg = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &db;
        }
        dx.into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(bias) = &mut self.bias {
            f(&format!("{prefix}.bias"), bias);
        }
    }
}

/// Transposed 2-D convolution (fractionally strided). Weight layout
/// `[c_in, c_out, k, k]`; output side is `(in-1)*stride + k - 2*padding`.
pub struct ConvTranspose2d<A: Scalar> {
    pub weight: Param<A>,
    pub bias: Option<Param<A>>,
    pub stride: usize,
    pub padding: usize,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    cache_x: Option<Tensor<A>>,
}

impl<A: Scalar> ConvTranspose2d<A> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let weight = Param::new(he_normal(&[c_in, c_out, kernel, kernel], fan_in, rng));
        let bias = bias.then(|| Param::new(zeros(&[c_out])));
        Self {
            weight,
            bias,
            stride,
            padding,
            c_in,
            c_out,
            kernel,
            cache_x: None,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.c_out
    }
}

impl<A: Scalar> Layer<A> for ConvTranspose2d<A> {
    fn forward(&mut self, x: &Tensor<A>, train: bool) -> Tensor<A> {
        let x4 = x.view().into_dimensionality::<Ix4>().expect("deconv expects [b,c,h,w]");
        let (b, c, h, w) = x4.dim();
        assert_eq!(c, self.c_in, "deconv input channel mismatch");
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let nh = deconv_out_size(h, k, s, p);
        let nw = deconv_out_size(w, k, s, p);
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_in, self.c_out * k * k))
            .unwrap();

        let mut y = Array4::<A>::zeros((b, self.c_out, nh, nw));
        let chunks = batch_chunks(b);
        let pieces: Vec<(usize, Array4<A>)> = chunks
            .par_iter()
            .map(|&(b0, b1)| {
                let xc = x4.slice(s![b0..b1, .., .., ..]);
                let n = b1 - b0;
                let xmat = channels_to_mat(&xc, 0, self.c_in);
                // columns of `col` live on the input grid; col2im scatters the
                // k x k stencil onto the upsampled output grid
                let col = wmat.t().dot(&xmat);
                let mut yc = Array4::<A>::zeros((n, self.c_out, nh, nw));
                col2im(&col, &mut yc.view_mut(), 0, self.c_out, k, s, p, h, w);
                (b0, yc)
            })
            .collect();
        for (b0, yc) in pieces {
            let n = yc.shape()[0];
            y.slice_mut(s![b0..b0 + n, .., .., ..]).assign(&yc);
        }
        if let Some(bias) = &self.bias {
            let bv = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for co in 0..self.c_out {
                y.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bv[co]);
            }
        }
        if train {
            self.cache_x = Some(x.clone());
        }
        y.into_dyn()
    }

    fn backward(&mut self, grad_out: &Tensor<A>) -> Tensor<A> {
        let x = self
            .cache_x
            .take()
            .expect("deconv backward without cached forward")
            .into_dimensionality::<Ix4>()
            .unwrap();
        let dy = grad_out.view().into_dimensionality::<Ix4>().unwrap();
        let (b, _c, h, w) = x.dim();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let wmat = self
            .weight
            .value
            .view()
            .into_shape_with_order((self.c_in, self.c_out * k * k))
            .unwrap();

        let chunks = batch_chunks(b);
        let pieces: Vec<(usize, Array4<A>, Array2<A>)> = chunks
            .par_iter()
            .map(|&(b0, b1)| {
                let xc = x.slice(s![b0..b1, .., .., ..]);
                let dyc = dy.slice(s![b0..b1, .., .., ..]);
                let n = b1 - b0;
                // dcol gathers the output-grid gradient back onto the input grid
                let dcol = im2col(&dyc, 0, self.c_out, k, s, p, h, w);
                let dxmat = wmat.dot(&dcol);
                let mut dxc = Array4::<A>::zeros((n, self.c_in, h, w));
                mat_to_channels(&dxmat, &mut dxc.view_mut(), 0, self.c_in);
                let xmat = channels_to_mat(&xc, 0, self.c_in);
                let dw = xmat.dot(&dcol.t());
                (b0, dxc, dw)
            })
            .collect();

        let mut dx = Array4::<A>::zeros(x.dim());
        let mut wgrad = self
            .weight
            .grad
            .view_mut()
            .into_shape_with_order((self.c_in, self.c_out * k * k))
            .unwrap();
        for (b0, dxc, dw) in pieces {
            let n = dxc.shape()[0];
            dx.slice_mut(s![b0..b0 + n, .., .., ..]).assign(&dxc);
            wgrad += &dw;
        }
        if let Some(bias) = &mut self.bias {
            let db = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            let mut bg = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            bg += &db;
        }
        dx.into_dyn()
    }

    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<A>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        if let Some(bias) = &mut self.bias {
            f(&format!("{prefix}.bias"), bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut r = rng();
        let mut conv = Conv2d::<f64>::new(3, 4, 3, 2, 1, 1, true, &mut r);
        let x = Tensor::<f64>::from_shape_simple_fn(IxDyn(&[2, 3, 5, 5]), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        let y = conv.forward(&x, false);
        let y = y.view().into_dimensionality::<Ix4>().unwrap();
        let w = conv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let bias = conv.bias.as_ref().unwrap().value.clone();
        let (oh, ow) = (conv_out_size(5, 3, 2, 1), conv_out_size(5, 3, 2, 1));
        for b in 0..2 {
            for co in 0..4 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias[[co]];
                        for ci in 0..3 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 5 && ix >= 0 && ix < 5 {
                                        acc += x[[b, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        assert!((y[[b, co, oy, ox]] - acc).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn grouped_conv_matches_naive_loop() {
        let mut r = rng();
        let groups = 2;
        let mut conv = Conv2d::<f64>::new(4, 6, 3, 1, 1, groups, false, &mut r);
        let x = Tensor::<f64>::from_shape_simple_fn(IxDyn(&[1, 4, 4, 4]), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        let y = conv.forward(&x, false);
        let y = y.view().into_dimensionality::<Ix4>().unwrap();
        let w = conv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (cig, cog) = (2, 3);
        for co in 0..6 {
            let g = co / cog;
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut acc = 0.0;
                    for cl in 0..cig {
                        let ci = g * cig + cl;
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy + ky) as isize - 1;
                                let ix = (ox + kx) as isize - 1;
                                if iy >= 0 && iy < 4 && ix >= 0 && ix < 4 {
                                    acc += x[[0, ci, iy as usize, ix as usize]] * w[[co, cl, ky, kx]];
                                }
                            }
                        }
                    }
                    assert!((y[[0, co, oy, ox]] - acc).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn deconv_doubles_spatial_side_with_k4_s2_p1() {
        let mut r = rng();
        let mut deconv = ConvTranspose2d::<f32>::new(11, 11, 4, 2, 1, true, &mut r);
        let x = Tensor::<f32>::zeros(IxDyn(&[2, 11, 8, 8]));
        let y = deconv.forward(&x, false);
        assert_eq!(y.shape(), &[2, 11, 16, 16]);
    }

    #[test]
    fn deconv_matches_naive_scatter() {
        let mut r = rng();
        let mut deconv = ConvTranspose2d::<f64>::new(2, 3, 4, 2, 1, true, &mut r);
        let x = Tensor::<f64>::from_shape_simple_fn(IxDyn(&[1, 2, 3, 3]), || {
            use rand::Rng;
            r.gen_range(-1.0..1.0)
        });
        let y = deconv.forward(&x, false);
        let y = y.view().into_dimensionality::<Ix4>().unwrap();
        let w = deconv
            .weight
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let bias = deconv.bias.as_ref().unwrap().value.clone();
        let side = deconv_out_size(3, 4, 2, 1);
        let mut expect = Array4::<f64>::zeros((1, 3, side, side));
        for co in 0..3 {
            expect.slice_mut(s![0, co, .., ..]).fill(bias[[co]]);
        }
        for ci in 0..2 {
            for iy in 0..3 {
                for ix in 0..3 {
                    for co in 0..3 {
                        for ky in 0..4 {
                            for kx in 0..4 {
                                let ty = (iy * 2 + ky) as isize - 1;
                                let tx = (ix * 2 + kx) as isize - 1;
                                if ty >= 0 && (ty as usize) < side && tx >= 0 && (tx as usize) < side
                                {
                                    expect[[0, co, ty as usize, tx as usize]] +=
                                        x[[0, ci, iy, ix]] * w[[ci, co, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
        for (a, b) in y.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}
