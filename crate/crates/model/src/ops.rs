//! Numeric kernels that the autodiff graph calls into.
//!
//! The 2-D convolution is an im2col + GEMM custom op with a hand-written
//! backward pass; on a single CPU core it is several times faster than the
//! generic candle kernels for the small feature maps used here.

use candle_core::{backprop::GradStore, CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, D};

type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> CResult<Self> {
        let (&[b, ci, h, w], &[co, wci, kh, kw]) = (input, weight) else {
            candle_core::bail!("conv2d expects rank-4 input and weight, got {input:?} / {weight:?}");
        };
        if ci != wci {
            candle_core::bail!("conv2d channel mismatch: input {ci}, weight {wci}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            candle_core::bail!("conv2d kernel larger than padded input");
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { b, ci, h, w, co, kh, kw, stride, pad, ho, wo })
    }

    fn patch(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

trait Scalar: Copy + Default + std::ops::AddAssign + 'static {
    /// `c = a * b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn zero() -> Self;
    fn one() -> Self;
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                // SAFETY: the slices cover every index addressed by the given
                // strides; callers pass dense row-major or transposed views.
                unsafe {
                    $f(
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
                    )
                }
            }
            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.ci {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { srow[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.ci {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], l: &Layout) -> CResult<&'a [T]> {
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("conv2d kernel requires contiguous operands"),
    }
}

fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut out = vec![T::zero(); g.b * g.co * plane];
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.b {
        im2col(&x[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w], g, &mut cols);
        let dst = &mut out[b * g.co * plane..(b + 1) * g.co * plane];
        T::gemm(g.co, patch, plane, w, patch as isize, 1, &cols, plane as isize, 1, T::zero(), dst);
    }
    out
}

fn conv_grad_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut dx = vec![T::zero(); g.b * g.ci * g.h * g.w];
    let mut dcols = vec![T::zero(); patch * plane];
    for b in 0..g.b {
        let go = &gout[b * g.co * plane..(b + 1) * g.co * plane];
        // dcols = W^T (patch x co) * gout_b (co x plane)
        T::gemm(patch, g.co, plane, w, 1, patch as isize, go, plane as isize, 1, T::zero(), &mut dcols);
        col2im(&dcols, g, &mut dx[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w]);
    }
    dx
}

fn conv_grad_weight<T: Scalar>(x: &[T], gout: &[T], g: &ConvGeom) -> Vec<T> {
    let (patch, plane) = (g.patch(), g.out_plane());
    let mut dw = vec![T::zero(); g.co * patch];
    let mut cols = vec![T::zero(); patch * plane];
    for b in 0..g.b {
        im2col(&x[b * g.ci * g.h * g.w..(b + 1) * g.ci * g.h * g.w], g, &mut cols);
        let go = &gout[b * g.co * plane..(b + 1) * g.co * plane];
        // dW += gout_b (co x plane) * cols^T (plane x patch)
        let beta = if b == 0 { T::zero() } else { T::one() };
        T::gemm(g.co, plane, patch, go, plane as isize, 1, &cols, 1, plane as isize, beta, &mut dw);
    }
    dw
}

#[derive(Debug, Clone, Copy)]
struct Conv2dOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for Conv2dOp {
    fn name(&self) -> &'static str {
        "imd-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => {
                CpuStorage::F32(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w)) => {
                CpuStorage::F64(conv_forward(contiguous(x, l1)?, contiguous(w, l2)?, &g))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from((g.b, g.co, g.ho, g.wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(w, &ConvGradInput { stride: self.stride, pad: self.pad, input: x.dims4()? })?;
        let gw = x.apply_op2_no_bwd(&grad, &ConvGradWeight { stride: self.stride, pad: self.pad, weight: w.dims4()? })?;
        Ok((Some(gx), Some(gw)))
    }
}

struct ConvGradInput {
    stride: usize,
    pad: usize,
    input: (usize, usize, usize, usize),
}

impl CustomOp2 for ConvGradInput {
    fn name(&self) -> &'static str {
        "imd-conv2d-grad-input"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (b, ci, h, w) = self.input;
        let g = ConvGeom::new(&[b, ci, h, w], l2.dims(), self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(go), CpuStorage::F32(wt)) => {
                CpuStorage::F32(conv_grad_input(contiguous(go, l1)?, contiguous(wt, l2)?, &g))
            }
            (CpuStorage::F64(go), CpuStorage::F64(wt)) => {
                CpuStorage::F64(conv_grad_input(contiguous(go, l1)?, contiguous(wt, l2)?, &g))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.input)))
    }
}

struct ConvGradWeight {
    stride: usize,
    pad: usize,
    weight: (usize, usize, usize, usize),
}

impl CustomOp2 for ConvGradWeight {
    fn name(&self) -> &'static str {
        "imd-conv2d-grad-weight"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (co, ci, kh, kw) = self.weight;
        let g = ConvGeom::new(l1.dims(), &[co, ci, kh, kw], self.stride, self.pad)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(go)) => {
                CpuStorage::F32(conv_grad_weight(contiguous(x, l1)?, contiguous(go, l2)?, &g))
            }
            (CpuStorage::F64(x), CpuStorage::F64(go)) => {
                CpuStorage::F64(conv_grad_weight(contiguous(x, l1)?, contiguous(go, l2)?, &g))
            }
            _ => candle_core::bail!("conv2d supports matching f32 or f64 operands"),
        };
        Ok((out, Shape::from(self.weight)))
    }
}

/// 2-D convolution without bias: `x [B, Ci, H, W]`, `w [Co, Ci, kh, kw]`.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> CResult<Tensor> {
    x.contiguous()?.apply_op2(&w.contiguous()?, Conv2dOp { stride, pad })
}

/// Numerically stable softmax; the shift is detached since softmax is shift invariant.
pub fn softmax(x: &Tensor, dim: D) -> CResult<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let e = x.broadcast_sub(&shift)?.exp()?;
    e.broadcast_div(&e.sum_keepdim(dim)?)
}

pub fn log_softmax(x: &Tensor, dim: D) -> CResult<Tensor> {
    let shift = x.max_keepdim(dim)?.detach();
    let z = x.broadcast_sub(&shift)?;
    z.broadcast_sub(&z.exp()?.sum_keepdim(dim)?.log()?)
}

/// Gradient of `loss` with respect to `t`, or zeros when `t` is unused.
pub fn grad_or_zeros(grads: &GradStore, t: &Tensor) -> CResult<Tensor> {
    match grads.get(t) {
        Some(g) => Ok(g.clone()),
        None => t.zeros_like(),
    }
}

/// Scalar value of a rank-0 or single-element tensor as f64.
pub fn scalar(t: &Tensor) -> CResult<f64> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>().map(|v| v[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    /// Direct nested-loop convolution.
    fn conv_oracle(x: &[f64], xs: (usize, usize, usize, usize), w: &[f64], ws: (usize, usize, usize, usize), stride: usize, pad: usize) -> Vec<f64> {
        let (b, ci, h, wd) = xs;
        let (co, _, kh, kw) = ws;
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * co * ho * wo];
        for n in 0..b {
            for o in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[((n * ci + c) * h + iy as usize) * wd + ix as usize]
                                            * w[((o * ci + c) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((n * co + o) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let dev = Device::Cpu;
        for &(stride, pad, k) in &[(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 2)] {
            let xs = (2, 3, 7, 6);
            let ws = (4, 3, k, k);
            let xv = pseudo(2 * 3 * 7 * 6, 1);
            let wv = pseudo(4 * 3 * k * k, 2);
            let x = Tensor::from_vec(xv.clone(), xs, &dev).unwrap();
            let w = Tensor::from_vec(wv.clone(), ws, &dev).unwrap();
            let got = conv2d(&x, &w, stride, pad).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let want = conv_oracle(&xv, xs, &wv, ws, stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let dev = Device::Cpu;
        let xs = (2, 2, 5, 4);
        let ws = (3, 2, 3, 3);
        let xv = pseudo(2 * 2 * 5 * 4, 3);
        let wv = pseudo(3 * 2 * 9, 4);
        let probe = pseudo(2 * 3 * 3 * 2, 5);
        let (stride, pad) = (2, 1);
        let loss_of = |x: &[f64], w: &[f64]| -> f64 {
            conv_oracle(x, xs, w, ws, stride, pad).iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let x = Var::from_tensor(&Tensor::from_vec(xv.clone(), xs, &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::from_vec(wv.clone(), ws, &dev).unwrap()).unwrap();
        let y = conv2d(&x, &w, stride, pad).unwrap();
        let p = Tensor::from_vec(probe.clone(), y.dims(), &dev).unwrap();
        let grads = (y * p).unwrap().sum_all().unwrap().backward().unwrap();
        let gx = grads.get(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let gw = grads.get(&w).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in 0..xv.len() {
            let mut a = xv.clone();
            let mut b = xv.clone();
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss_of(&a, &wv) - loss_of(&b, &wv)) / (2.0 * eps);
            assert!((fd - gx[i]).abs() < 1e-7, "dx[{i}]: {fd} vs {}", gx[i]);
        }
        for i in 0..wv.len() {
            let mut a = wv.clone();
            let mut b = wv.clone();
            a[i] += eps;
            b[i] -= eps;
            let fd = (loss_of(&xv, &a) - loss_of(&xv, &b)) / (2.0 * eps);
            assert!((fd - gw[i]).abs() < 1e-7, "dw[{i}]: {fd} vs {}", gw[i]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f32, 1001.0, 999.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s = softmax(&x, D::Minus1).unwrap().sum(1).unwrap().to_vec1::<f32>().unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
