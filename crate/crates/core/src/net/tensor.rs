//! CHW tensors and the convolution kernels the predictor is built from.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type of the predictor. Training runs in `f32`;
/// gradient checks run the same code in `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c = alpha * a . b + beta * c` for strided row/column layouts.
    ///
    /// # Safety
    /// Strides and dimensions must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major `c (m x n) = op(a) . op(b) + beta * c`, where `op(a)` is
/// `m x k` (stored `k x m` when `ta`) and `op(b)` is `k x n` (stored `n x k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assert above bounds every access implied by the strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    /// Stacks tensors of equal spatial size along channels.
    pub fn concat(parts: &[&Tensor<T>]) -> Tensor<T> {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut c = 0;
        for t in parts {
            assert_eq!((t.h, t.w), (h, w));
            data.extend_from_slice(&t.data);
            c += t.c;
        }
        Tensor { c, h, w, data }
    }

    /// Splits channels back into the given widths.
    pub fn split(&self, widths: &[usize]) -> Vec<Tensor<T>> {
        let plane = self.plane();
        let mut off = 0;
        widths
            .iter()
            .map(|&c| {
                let t = Tensor {
                    c,
                    h: self.h,
                    w: self.w,
                    data: self.data[off * plane..(off + c) * plane].to_vec(),
                };
                off += c;
                t
            })
            .collect()
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    if factor == 1 {
        return x.clone();
    }
    let (h, w) = (x.h * factor, x.w * factor);
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        for y in 0..h {
            let src = &x.data[c * x.plane() + (y / factor) * x.w..][..x.w];
            let dst = &mut out.data[c * h * w + y * w..][..w];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / factor];
            }
        }
    }
    out
}

/// Adjoint of [`upsample`]: sums each `factor x factor` block.
pub fn upsample_backward<T: Scalar>(dy: &Tensor<T>, factor: usize) -> Tensor<T> {
    if factor == 1 {
        return dy.clone();
    }
    let (h, w) = (dy.h / factor, dy.w / factor);
    let mut out = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for x in 0..dy.w {
                let i = c * h * w + (y / factor) * w + x / factor;
                out.data[i] = out.data[i] + dy.data[c * dy.plane() + y * dy.w + x];
            }
        }
    }
    out
}

/// 2-D convolution with "same" padding (`kernel / 2`) and optional fused ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub relu: bool,
    /// `out_ch x (in_ch * kernel * kernel)`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    in_h: usize,
    in_w: usize,
    cols: Vec<T>,
    out: Tensor<T>,
}

impl<T: Scalar> ConvCache<T> {
    /// Positivity of each output activation.
    pub fn positive(&self) -> impl Iterator<Item = bool> + '_ {
        self.out.data.iter().map(|v| *v > T::zero())
    }
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, relu: bool) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            relu,
            weight: vec![T::zero(); out_ch * in_ch * kernel * kernel],
            bias: vec![T::zero(); out_ch],
        }
    }

    #[inline]
    fn pad(&self) -> usize {
        self.kernel / 2
    }

    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let p = self.pad();
        (
            (h + 2 * p - self.kernel) / self.stride + 1,
            (w + 2 * p - self.kernel) / self.stride + 1,
        )
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    fn im2col(&self, x: &Tensor<T>, ho: usize, wo: usize) -> Vec<T> {
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            return x.data.clone();
        }
        let p = self.pad() as isize;
        let n = ho * wo;
        let mut cols = vec![T::zero(); self.fan_in() * n];
        for c in 0..x.c {
            let plane = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.w..][..x.w];
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix >= 0 && ix < x.w as isize {
                                row[oy * wo + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, ho: usize, wo: usize) -> Tensor<T> {
        let k = self.kernel;
        if k == 1 && self.stride == 1 {
            return Tensor {
                c: self.in_ch,
                h,
                w,
                data: cols.to_vec(),
            };
        }
        let p = self.pad() as isize;
        let n = ho * wo;
        let mut dx = Tensor::zeros(self.in_ch, h, w);
        for c in 0..self.in_ch {
            let plane = &mut dx.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * n..][..n];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - p;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - p;
                            if ix >= 0 && ix < w as isize {
                                let d = &mut plane[iy as usize * w + ix as usize];
                                *d = *d + row[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        assert_eq!(x.c, self.in_ch, "conv input channels");
        let (ho, wo) = self.out_size(x.h, x.w);
        let cols = self.im2col(x, ho, wo);
        let n = ho * wo;
        let mut out = Tensor::zeros(self.out_ch, ho, wo);
        for (o, b) in self.bias.iter().enumerate() {
            out.data[o * n..(o + 1) * n]
                .iter_mut()
                .for_each(|v| *v = *b);
        }
        gemm(
            false,
            false,
            self.out_ch,
            n,
            self.fan_in(),
            &self.weight,
            &cols,
            T::one(),
            &mut out.data,
        );
        if self.relu {
            out.data.iter_mut().for_each(|v| *v = v.max(T::zero()));
        }
        let cache = ConvCache {
            in_h: x.h,
            in_w: x.w,
            cols,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Returns `(d input, d weight, d bias)`.
    pub fn backward(&self, cache: &ConvCache<T>, dy: &Tensor<T>) -> (Tensor<T>, Vec<T>, Vec<T>) {
        let n = dy.plane();
        let mut dpre = dy.data.clone();
        if self.relu {
            for (g, o) in dpre.iter_mut().zip(&cache.out.data) {
                if *o <= T::zero() {
                    *g = T::zero();
                }
            }
        }
        let db: Vec<T> = (0..self.out_ch)
            .map(|o| dpre[o * n..(o + 1) * n].iter().copied().sum())
            .collect();
        let mut dw = vec![T::zero(); self.weight.len()];
        gemm(
            false,
            true,
            self.out_ch,
            self.fan_in(),
            n,
            &dpre,
            &cache.cols,
            T::zero(),
            &mut dw,
        );
        let mut dcols = vec![T::zero(); self.fan_in() * n];
        gemm(
            true,
            false,
            self.fan_in(),
            n,
            self.out_ch,
            &self.weight,
            &dpre,
            T::zero(),
            &mut dcols,
        );
        let dx = self.col2im(&dcols, cache.in_h, cache.in_w, dy.h, dy.w);
        (dx, dw, db)
    }
}
