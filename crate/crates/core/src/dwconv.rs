//! Depthwise convolution as a fused CPU op with an explicit backward pass.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

/// `out[b, y, x, c] = sum k[dy, dx, c] * x[b, y + dy - p, x + dx - p, c]`, zero padded.
/// With `flip` the kernel is rotated by 180 degrees, which gives the input gradient.
/// The flipped form has no backward of its own.
struct Depthwise {
    flip: bool,
}

/// `gk[dy, dx, c] = sum g[b, y, x, c] * x[b, y + dy - p, x + dx - p, c]`.
struct KernelGrad {
    k: usize,
}

#[derive(Clone, Copy)]
struct Dims {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
}

impl Dims {
    fn taps(&self) -> impl Iterator<Item = (usize, usize, isize, isize)> {
        let (k, p) = (self.k, (self.k / 2) as isize);
        (0..k).flat_map(move |dy| (0..k).map(move |dx| (dy, dx, dy as isize - p, dx as isize - p)))
    }

    /// Output rows/cols whose shifted source index stays inside the map.
    fn valid(n: usize, off: isize) -> std::ops::Range<usize> {
        let lo = (-off).max(0) as usize;
        let hi = (n as isize - off).clamp(0, n as isize) as usize;
        lo..hi.max(lo)
    }
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("depthwise conv expects contiguous inputs"),
    }
}

fn forward<T: WithDType>(x: &[T], kernel: &[T], d: Dims, flip: bool) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); x.len()];
    let row = d.w * d.c;
    for (dy, dx, oy, ox) in d.taps() {
        let (ky, kx) = if flip { (d.k - 1 - dy, d.k - 1 - dx) } else { (dy, dx) };
        let tap = &kernel[(ky * d.k + kx) * d.c..][..d.c];
        let cols = Dims::valid(d.w, ox);
        for b in 0..d.b {
            for y in Dims::valid(d.h, oy) {
                let dst = (b * d.h + y) * row;
                let src = (b * d.h + (y as isize + oy) as usize) * row;
                for x_ in cols.clone() {
                    let o = &mut out[dst + x_ * d.c..][..d.c];
                    let i = &x[src + (x_ as isize + ox) as usize * d.c..][..d.c];
                    for ((o, &i), &t) in o.iter_mut().zip(i).zip(tap) {
                        *o += i * t;
                    }
                }
            }
        }
    }
    out
}

fn kernel_grad<T: WithDType>(x: &[T], g: &[T], d: Dims) -> Vec<T> {
    let mut out = vec![T::from_f64(0.0); d.k * d.k * d.c];
    let row = d.w * d.c;
    for (dy, dx, oy, ox) in d.taps() {
        let acc = &mut out[(dy * d.k + dx) * d.c..][..d.c];
        let cols = Dims::valid(d.w, ox);
        for b in 0..d.b {
            for y in Dims::valid(d.h, oy) {
                let dst = (b * d.h + y) * row;
                let src = (b * d.h + (y as isize + oy) as usize) * row;
                for x_ in cols.clone() {
                    let gv = &g[dst + x_ * d.c..][..d.c];
                    let xv = &x[src + (x_ as isize + ox) as usize * d.c..][..d.c];
                    for ((a, &gv), &xv) in acc.iter_mut().zip(gv).zip(xv) {
                        *a += gv * xv;
                    }
                }
            }
        }
    }
    out
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    l.shape().dims4()
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise-conv"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims4(l1)?;
        let (k, _, _) = l2.shape().dims3()?;
        let d = Dims { b, h, w, c, k };
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(forward(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, d, self.flip))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(forward(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, d, self.flip))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, kernel: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let gx = grad.apply_op2_no_bwd(kernel, &Depthwise { flip: !self.flip })?;
        let gk = x.apply_op2_no_bwd(&grad, &KernelGrad { k: kernel.dim(0)? })?;
        Ok((Some(gx), Some(gk)))
    }
}

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "depthwise-conv-kernel-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, h, w, c) = dims4(l1)?;
        let d = Dims { b, h, w, c, k: self.k };
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                CpuStorage::F32(kernel_grad(slice::<f32>(s1, l1)?, slice::<f32>(s2, l2)?, d))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                CpuStorage::F64(kernel_grad(slice::<f64>(s1, l1)?, slice::<f64>(s2, l2)?, d))
            }
            _ => candle_core::bail!("depthwise conv supports matching f32 or f64 inputs"),
        };
        Ok((out, Shape::from((self.k, self.k, c))))
    }
}

/// Depthwise `k x k` convolution (odd `k`, zero padding) of `[B, H, W, C]` by `[k, k, C]`.
pub fn depthwise(x: &Tensor, kernel: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Depthwise { flip: false })
}
