//! 2-D cross-correlation (NCHW) with its two adjoints, each differentiable.
//!
//! `conv2d`, `conv2d_input_grad` and `conv2d_weight_grad` are the three partial
//! derivatives of one trilinear form, so the backward of each is expressed with
//! the other two and gradients of any order compose.

use crate::float::{gemm, Float};
use crate::tensor::{Op, Tensor};

/// Stride and zero padding applied symmetrically on both spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dConfig {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dConfig {
    pub fn same(kernel: usize) -> Self {
        Conv2dConfig {
            stride: 1,
            padding: kernel / 2,
        }
    }
}

impl Default for Conv2dConfig {
    fn default() -> Self {
        Conv2dConfig {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cfg: Conv2dConfig,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvGeom {
    fn out_hw(&self) -> (usize, usize) {
        let p = self.cfg.padding;
        let s = self.cfg.stride;
        (
            (self.in_h + 2 * p - self.k_h) / s + 1,
            (self.in_w + 2 * p - self.k_w) / s + 1,
        )
    }

    fn uses_shifted_gemm(&self) -> bool {
        self.cfg.stride == 1 && !self.is_pointwise()
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` columns.
fn im2col<T: Float>(x: &[T], channels: usize, g: &ConvGeom, cols: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    let s = g.cfg.stride as isize;
    let p = g.cfg.padding as isize;
    let l = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h as isize {
            for kj in 0..g.k_w as isize {
                let dst = &mut cols[row * l..(row + 1) * l];
                for oi in 0..oh {
                    let ii = oi as isize * s + ki - p;
                    let dst_row = &mut dst[oi * ow..(oi + 1) * ow];
                    if ii < 0 || ii >= h {
                        dst_row.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[(ii * w) as usize..((ii + 1) * w) as usize];
                    for (oj, v) in dst_row.iter_mut().enumerate() {
                        let jj = oj as isize * s + kj - p;
                        *v = if jj < 0 || jj >= w {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[C, H, W]` image (accumulating).
fn col2im<T: Float>(cols: &[T], channels: usize, g: &ConvGeom, x: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.in_h as isize, g.in_w as isize);
    let s = g.cfg.stride as isize;
    let p = g.cfg.padding as isize;
    let l = oh * ow;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k_h as isize {
            for kj in 0..g.k_w as isize {
                let src = &cols[row * l..(row + 1) * l];
                for oi in 0..oh {
                    let ii = oi as isize * s + ki - p;
                    if ii < 0 || ii >= h {
                        continue;
                    }
                    let dst = &mut plane[(ii * w) as usize..((ii + 1) * w) as usize];
                    for oj in 0..ow {
                        let jj = oj as isize * s + kj - p;
                        if jj >= 0 && jj < w {
                            dst[jj as usize] = dst[jj as usize] + src[oi * ow + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Stride-1 convolutions run as one strided GEMM per kernel tap over a
/// zero-padded copy of the input, avoiding the `im2col` buffer.
///
/// Each channel plane is padded to `hp x wp` and followed by `k_w - 1` zeros so
/// that every tap's shifted view of `ho * wp` positions stays in bounds. Output
/// positions are computed on the padded row width; columns `j >= wo` are junk
/// and dropped on the way out.
struct Shifted {
    hp: usize,
    wp: usize,
    /// Padded plane stride.
    plane: usize,
    /// Output positions on the padded row grid, `ho * wp`.
    lq: usize,
    ho: usize,
    wo: usize,
}

impl Shifted {
    fn new(g: &ConvGeom) -> Self {
        let p = g.cfg.padding;
        let (hp, wp) = (g.in_h + 2 * p, g.in_w + 2 * p);
        let (ho, wo) = g.out_hw();
        Shifted {
            hp,
            wp,
            plane: hp * wp + g.k_w - 1,
            lq: ho * wp,
            ho,
            wo,
        }
    }

    fn tap_offset(&self, ki: usize, kj: usize) -> usize {
        ki * self.wp + kj
    }
}

fn pad_planes<T: Float>(x: &[T], channels: usize, g: &ConvGeom, sh: &Shifted) -> Vec<T> {
    let p = g.cfg.padding;
    let mut out = vec![T::zero(); channels * sh.plane];
    for c in 0..channels {
        let src = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        let dst = &mut out[c * sh.plane..(c + 1) * sh.plane];
        for i in 0..g.in_h {
            let row = (i + p) * sh.wp + p;
            dst[row..row + g.in_w].copy_from_slice(&src[i * g.in_w..(i + 1) * g.in_w]);
        }
    }
    debug_assert!(sh.hp * sh.wp <= sh.plane);
    out
}

fn shifted_forward<T: Float>(xb: &[T], w: &[T], o: usize, c: usize, g: &ConvGeom, out: &mut [T]) {
    let sh = Shifted::new(g);
    let xp = pad_planes(xb, c, g, &sh);
    let taps = g.k_h * g.k_w;
    let mut ext = vec![T::zero(); o * sh.lq];
    for ki in 0..g.k_h {
        for kj in 0..g.k_w {
            let d = sh.tap_offset(ki, kj);
            let first = ki == 0 && kj == 0;
            assert!(d + sh.lq <= sh.plane && w.len() == o * c * taps);
            // SAFETY: A reads w[oc*taps + tap] for oc < o*c; B reads xp[ch*plane + d + q]
            // with d + q < plane; C covers ext exactly. Bounds asserted above.
            unsafe {
                T::gemm_raw(
                    o,
                    c,
                    sh.lq,
                    T::one(),
                    w.as_ptr().add(ki * g.k_w + kj),
                    (c * taps) as isize,
                    taps as isize,
                    xp.as_ptr().add(d),
                    sh.plane as isize,
                    1,
                    if first { T::zero() } else { T::one() },
                    ext.as_mut_ptr(),
                    sh.lq as isize,
                    1,
                );
            }
        }
    }
    for oc in 0..o {
        for i in 0..sh.ho {
            let src = &ext[oc * sh.lq + i * sh.wp..oc * sh.lq + i * sh.wp + sh.wo];
            out[(oc * sh.ho + i) * sh.wo..(oc * sh.ho + i + 1) * sh.wo].copy_from_slice(src);
        }
    }
}

/// Output gradient laid out on the padded row grid, junk columns zeroed.
fn extend_rows<T: Float>(gb: &[T], o: usize, sh: &Shifted) -> Vec<T> {
    let mut ext = vec![T::zero(); o * sh.lq];
    for oc in 0..o {
        for i in 0..sh.ho {
            let src = &gb[(oc * sh.ho + i) * sh.wo..(oc * sh.ho + i + 1) * sh.wo];
            ext[oc * sh.lq + i * sh.wp..oc * sh.lq + i * sh.wp + sh.wo].copy_from_slice(src);
        }
    }
    ext
}

fn shifted_input_grad<T: Float>(gb: &[T], w: &[T], o: usize, c: usize, g: &ConvGeom, xb: &mut [T]) {
    let sh = Shifted::new(g);
    let ext = extend_rows(gb, o, &sh);
    let taps = g.k_h * g.k_w;
    let mut gp = vec![T::zero(); c * sh.plane];
    for ki in 0..g.k_h {
        for kj in 0..g.k_w {
            let d = sh.tap_offset(ki, kj);
            assert!(d + sh.lq <= sh.plane && w.len() == o * c * taps);
            // SAFETY: A is w transposed per tap; B covers ext; C rows gp[ch*plane + d ..
            // + lq] stay inside each padded plane. Bounds asserted above.
            unsafe {
                T::gemm_raw(
                    c,
                    o,
                    sh.lq,
                    T::one(),
                    w.as_ptr().add(ki * g.k_w + kj),
                    taps as isize,
                    (c * taps) as isize,
                    ext.as_ptr(),
                    sh.lq as isize,
                    1,
                    T::one(),
                    gp.as_mut_ptr().add(d),
                    sh.plane as isize,
                    1,
                );
            }
        }
    }
    let p = g.cfg.padding;
    for ch in 0..c {
        for i in 0..g.in_h {
            let row = ch * sh.plane + (i + p) * sh.wp + p;
            xb[(ch * g.in_h + i) * g.in_w..(ch * g.in_h + i + 1) * g.in_w].copy_from_slice(&gp[row..row + g.in_w]);
        }
    }
}

fn shifted_weight_grad<T: Float>(xb: &[T], gb: &[T], o: usize, c: usize, g: &ConvGeom, dw: &mut [T], accumulate: bool) {
    let sh = Shifted::new(g);
    let xp = pad_planes(xb, c, g, &sh);
    let ext = extend_rows(gb, o, &sh);
    let taps = g.k_h * g.k_w;
    assert_eq!(dw.len(), o * c * taps);
    for ki in 0..g.k_h {
        for kj in 0..g.k_w {
            let d = sh.tap_offset(ki, kj);
            assert!(d + sh.lq <= sh.plane);
            // SAFETY: A covers ext; B reads xp[ch*plane + d + q] in bounds; C writes
            // dw[oc*c*taps + ch*taps + tap], inside dw. Bounds asserted above.
            unsafe {
                T::gemm_raw(
                    o,
                    sh.lq,
                    c,
                    T::one(),
                    ext.as_ptr(),
                    sh.lq as isize,
                    1,
                    xp.as_ptr().add(d),
                    1,
                    sh.plane as isize,
                    if accumulate { T::one() } else { T::zero() },
                    dw.as_mut_ptr().add(ki * g.k_w + kj),
                    (c * taps) as isize,
                    taps as isize,
                );
            }
        }
    }
}

fn conv_forward<T: Float>(x: &Tensor<T>, w: &Tensor<T>, g: &ConvGeom) -> (Vec<T>, Vec<usize>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let (oh, ow) = g.out_hw();
    let k = c * g.k_h * g.k_w;
    let l = oh * ow;
    let mut out = vec![T::zero(); n * o * l];
    let in_len = c * g.in_h * g.in_w;
    if g.uses_shifted_gemm() {
        for b in 0..n {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            shifted_forward(xb, w.data(), o, c, g, &mut out[b * o * l..(b + 1) * o * l]);
        }
        return (out, vec![n, o, oh, ow]);
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, g, &mut cols);
            &cols
        };
        gemm(o, k, l, w.data(), false, colv, false, &mut out[b * o * l..(b + 1) * o * l], false);
    }
    (out, vec![n, o, oh, ow])
}

fn conv_input_grad_forward<T: Float>(
    go: &Tensor<T>,
    w: &Tensor<T>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let n = go.shape()[0];
    let (o, c) = (w.shape()[0], w.shape()[1]);
    let (oh, ow) = g.out_hw();
    let k = c * g.k_h * g.k_w;
    let l = oh * ow;
    let in_len = c * g.in_h * g.in_w;
    let mut out = vec![T::zero(); n * in_len];
    if g.uses_shifted_gemm() {
        for b in 0..n {
            let gb = &go.data()[b * o * l..(b + 1) * o * l];
            shifted_input_grad(gb, w.data(), o, c, g, &mut out[b * in_len..(b + 1) * in_len]);
        }
        return (out, vec![n, c, g.in_h, g.in_w]);
    }
    let mut cols = vec![T::zero(); k * l];
    for b in 0..n {
        let gb = &go.data()[b * o * l..(b + 1) * o * l];
        let xb = &mut out[b * in_len..(b + 1) * in_len];
        if g.is_pointwise() {
            gemm(k, o, l, w.data(), true, gb, false, xb, false);
        } else {
            gemm(k, o, l, w.data(), true, gb, false, &mut cols, false);
            col2im(&cols, c, g, xb);
        }
    }
    (out, vec![n, c, g.in_h, g.in_w])
}

fn conv_weight_grad_forward<T: Float>(
    x: &Tensor<T>,
    go: &Tensor<T>,
    g: &ConvGeom,
) -> (Vec<T>, Vec<usize>) {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let o = go.shape()[1];
    let (oh, ow) = g.out_hw();
    let k = c * g.k_h * g.k_w;
    let l = oh * ow;
    let in_len = c * g.in_h * g.in_w;
    let mut out = vec![T::zero(); o * k];
    if g.uses_shifted_gemm() {
        for b in 0..n {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let gb = &go.data()[b * o * l..(b + 1) * o * l];
            shifted_weight_grad(xb, gb, o, c, g, &mut out, b > 0);
        }
        return (out, vec![o, c, g.k_h, g.k_w]);
    }
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * l] };
    for b in 0..n {
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        let colv: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, c, g, &mut cols);
            &cols
        };
        let gb = &go.data()[b * o * l..(b + 1) * o * l];
        gemm(o, l, k, gb, false, colv, true, &mut out, b > 0);
    }
    (out, vec![o, c, g.k_h, g.k_w])
}

impl<T: Float> Tensor<T> {
    /// Cross-correlation of `[N, C, H, W]` input with `[O, C, kh, kw]` weights.
    pub fn conv2d(&self, weight: &Tensor<T>, cfg: Conv2dConfig) -> Tensor<T> {
        assert_eq!(self.shape().len(), 4, "conv2d input must be NCHW");
        assert_eq!(weight.shape().len(), 4, "conv2d weight must be OCkk");
        assert_eq!(
            self.shape()[1],
            weight.shape()[1],
            "conv2d channel mismatch: input {:?}, weight {:?}",
            self.shape(),
            weight.shape()
        );
        assert!(cfg.stride >= 1);
        let g = ConvGeom {
            cfg,
            in_h: self.shape()[2],
            in_w: self.shape()[3],
            k_h: weight.shape()[2],
            k_w: weight.shape()[3],
        };
        assert!(
            g.in_h + 2 * cfg.padding >= g.k_h && g.in_w + 2 * cfg.padding >= g.k_w,
            "kernel larger than padded input"
        );
        let (data, shape) = conv_forward(self, weight, &g);
        Tensor::from_op(data, shape, Op::Conv2d(self.clone(), weight.clone(), g))
    }

    /// Same as `conv2d` followed by a per-output-channel bias.
    pub fn conv2d_bias(&self, weight: &Tensor<T>, bias: &Tensor<T>, cfg: Conv2dConfig) -> Tensor<T> {
        let o = weight.shape()[0];
        self.conv2d(weight, cfg).add(&bias.reshape(&[1, o, 1, 1]))
    }

    pub(crate) fn conv2d_geom(&self, weight: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
        let (data, shape) = conv_forward(self, weight, &g);
        Tensor::from_op(data, shape, Op::Conv2d(self.clone(), weight.clone(), g))
    }

    pub(crate) fn conv2d_input_grad(grad_out: &Tensor<T>, weight: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
        let (data, shape) = conv_input_grad_forward(grad_out, weight, &g);
        Tensor::from_op(
            data,
            shape,
            Op::Conv2dInputGrad(grad_out.clone(), weight.clone(), g),
        )
    }

    pub(crate) fn conv2d_weight_grad(input: &Tensor<T>, grad_out: &Tensor<T>, g: ConvGeom) -> Tensor<T> {
        let (data, shape) = conv_weight_grad_forward(input, grad_out, &g);
        Tensor::from_op(
            data,
            shape,
            Op::Conv2dWeightGrad(input.clone(), grad_out.clone(), g),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn the_three_conv_forms_are_mutually_adjoint(
            h in 3usize..9, w in 3usize..9, c in 1usize..4, o in 1usize..4,
            stride in 1usize..3, padding in 0usize..2, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let x = Tensor::new(r(2 * c * h * w), &[2, c, h, w]);
            let wt = Tensor::new(r(o * c * 6), &[o, c, 3, 2]);
            let y = x.conv2d(&wt, Conv2dConfig { stride, padding });
            let gout = Tensor::new(r(y.numel()), y.shape());
            let geom = ConvGeom { cfg: Conv2dConfig { stride, padding }, in_h: h, in_w: w, k_h: 3, k_w: 2 };
            let b1 = dot(y.data(), gout.data());
            let b2 = dot(x.data(), Tensor::conv2d_input_grad(&gout, &wt, geom).data());
            let b3 = dot(wt.data(), Tensor::conv2d_weight_grad(&x, &gout, geom).data());
            prop_assert!((b1 - b2).abs() < 1e-9 * (1.0 + b1.abs()));
            prop_assert!((b1 - b3).abs() < 1e-9 * (1.0 + b1.abs()));
        }
    }

    fn naive_conv(x: &[f64], n: usize, c: usize, h: usize, w: usize, wt: &[f64], o: usize, kh: usize, kw: usize, cfg: Conv2dConfig) -> Vec<f64> {
        let (s, p) = (cfg.stride as isize, cfg.padding as isize);
        let oh = (h + 2 * cfg.padding - kh) / cfg.stride + 1;
        let ow = (w + 2 * cfg.padding - kw) / cfg.stride + 1;
        let mut out = vec![0.0; n * o * oh * ow];
        for b in 0..n {
            for oc in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = i as isize * s + ki as isize - p;
                                    let jj = j as isize * s + kj as isize - p;
                                    if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                        acc += x[((b * c + ch) * h + ii as usize) * w + jj as usize]
                                            * wt[((oc * c + ch) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((b * o + oc) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn forward_matches_direct_loops(
            h in 2usize..9, w in 2usize..9, c in 1usize..4, o in 1usize..4,
            kh in 1usize..4, kw in 1usize..4, stride in 1usize..3, padding in 0usize..3, seed in any::<u64>()
        ) {
            use rand::{Rng, SeedableRng};
            prop_assume!(h + 2 * padding >= kh && w + 2 * padding >= kw);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let xs = r(2 * c * h * w);
            let ws = r(o * c * kh * kw);
            let cfg = Conv2dConfig { stride, padding };
            let y = Tensor::new(xs.clone(), &[2, c, h, w]).conv2d(&Tensor::new(ws.clone(), &[o, c, kh, kw]), cfg);
            let expected = naive_conv(&xs, 2, c, h, w, &ws, o, kh, kw, cfg);
            prop_assert_eq!(y.numel(), expected.len());
            for (a, b) in y.data().iter().zip(&expected) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_matches_matrix_product() {
        let x = Tensor::<f64>::new(vec![1., 2., 3., 4., 5., 6.], &[1, 2, 1, 3]);
        let w = Tensor::new(vec![1., -1., 0.5, 2.], &[2, 2, 1, 1]);
        let y = x.conv2d(&w, Conv2dConfig::default());
        assert_eq!(y.data(), &[-3., -3., -3., 8.5, 11., 13.5]);
    }
}
