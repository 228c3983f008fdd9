//! Fused CPU kernels with hand-written backward passes for the hot layers.
//! Candle's generic gradients for shifted slices and long elementwise chains
//! dominate a training step otherwise.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

trait Elem: Copy + Send + Sync + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Elem for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Elem for f64 {
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f64(v: f64) -> Self {
        v
    }
}

fn slice<'a, T>(data: &'a [T], layout: &Layout, op: &'static str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::RequiresContiguous { op }),
    }
}

/// Applies `f` to the storage of one tensor, dispatching on f32/f64.
macro_rules! unary_dispatch {
    ($storage:expr, $layout:expr, $name:expr, |$x:ident| $body:expr) => {
        match $storage {
            CpuStorage::F32(v) => {
                let $x = slice(v, $layout, $name)?;
                CpuStorage::F32($body)
            }
            CpuStorage::F64(v) => {
                let $x = slice(v, $layout, $name)?;
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg(format!("{} supports only f32 and f64", $name)).bt()),
        }
    };
}

macro_rules! binary_dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let ($a, $b) = (slice(a, $l1, $name)?, slice(b, $l2, $name)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let ($a, $b) = (slice(a, $l1, $name)?, slice(b, $l2, $name)?);
                CpuStorage::F64($body)
            }
            _ => return Err(candle_core::Error::Msg(format!("{} supports only f32 and f64", $name)).bt()),
        }
    };
}

// ---------------------------------------------------------------------------
// im2col

/// Geometry of a square-kernel convolution.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kk`.
    fn valid(&self, kk: usize, size: usize, out: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.pad);
        // o * s + kk - p must lie in [0, size).
        let lo = p.saturating_sub(kk).div_ceil(s);
        let hi = if size + p > kk { ((size + p - kk - 1) / s + 1).min(out) } else { 0 };
        (lo, hi.max(lo))
    }

    /// Calls `f(dst_offset, src_offset, len)` for every run of in-bounds
    /// elements along x; the source stride within a run is `stride`.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let cols = self.cols();
        for ci in 0..self.c {
            for ky in 0..k {
                let (oy_lo, oy_hi) = self.valid(ky, self.h, self.ho);
                for kx in 0..k {
                    let (ox_lo, ox_hi) = self.valid(kx, self.w, self.wo);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let row = (ci * k + ky) * k + kx;
                    for n in 0..self.n {
                        let plane = (n * self.c + ci) * self.h * self.w;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - p;
                            let dst = row * cols + (n * self.ho + oy) * self.wo + ox_lo;
                            let src = plane + iy * self.w + ox_lo * s + kx - p;
                            f(dst, src, ox_hi - ox_lo);
                        }
                    }
                }
            }
        }
    }

    fn unfold<T: Elem + Default>(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::default(); self.rows() * self.cols()];
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                out[dst..dst + len].copy_from_slice(&x[src..src + len]);
            } else {
                for (o, v) in out[dst..dst + len].iter_mut().zip(x[src..].iter().step_by(s)) {
                    *o = *v;
                }
            }
        });
        out
    }

    fn fold<T: Elem + Default + std::ops::AddAssign>(&self, g: &[T]) -> Vec<T> {
        let mut acc = vec![T::default(); self.n * self.c * self.h * self.w];
        let s = self.stride;
        self.for_each_run(|dst, src, len| {
            if s == 1 {
                for (a, v) in acc[src..src + len].iter_mut().zip(&g[dst..dst + len]) {
                    *a += *v;
                }
            } else {
                for (a, v) in acc[src..].iter_mut().step_by(s).zip(&g[dst..dst + len]) {
                    *a += *v;
                }
            }
        });
        acc
    }
}

struct Im2Col(ConvGeom);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = unary_dispatch!(s, l, "im2col", |x| g.unfold(x));
        Ok((out, Shape::from((g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

struct Col2Im(ConvGeom);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = unary_dispatch!(s, l, "col2im", |x| g.fold(x));
        Ok((out, Shape::from((g.n, g.c, g.h, g.w))))
    }
}

/// Patches of `x` (`[N, C, H, W]`) as a `[C*k*k, N*Ho*Wo]` matrix, rows
/// ordered (channel, ky, kx) and columns (sample, y, x); zero outside.
pub fn im2col(x: &Tensor, k: usize, stride: usize, pad: usize) -> Result<(Tensor, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let geom = ConvGeom { n, c, h, w, k, stride, pad, ho, wo };
    Ok((x.contiguous()?.apply_op1(Im2Col(geom))?, ho, wo))
}

// ---------------------------------------------------------------------------
// SiLU

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Silu;

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu-fused"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = unary_dispatch!(s, l, "silu-fused", |x| x
            .iter()
            .map(|&v| {
                let v = v.to_f64();
                Elem::from_f64(v * sigmoid(v))
            })
            .collect());
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &SiluGrad)?))
    }
}

struct SiluGrad;

impl CustomOp2 for SiluGrad {
    fn name(&self) -> &'static str {
        "silu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = binary_dispatch!(s1, l1, s2, l2, "silu-grad", |x, g| x
            .iter()
            .zip(g)
            .map(|(&x, &g)| {
                let (x, g) = (x.to_f64(), g.to_f64());
                let s = sigmoid(x);
                Elem::from_f64(g * s * (1.0 + x * (1.0 - s)))
            })
            .collect());
        Ok((out, l1.shape().clone()))
    }
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

// ---------------------------------------------------------------------------
// Group normalization (without the affine part)

struct GroupNormalize {
    groups: usize,
    eps: f64,
}

/// Mean and inverse standard deviation of each contiguous group.
fn group_stats<T: Elem>(x: &[T], group_len: usize, eps: f64) -> Vec<(f64, f64)> {
    x.chunks_exact(group_len)
        .map(|g| {
            let mean = g.iter().map(|v| v.to_f64()).sum::<f64>() / group_len as f64;
            let var = g.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / group_len as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

impl GroupNormalize {
    fn group_len(&self, l: &Layout) -> usize {
        let dims = l.dims();
        dims[1..].iter().product::<usize>() / self.groups
    }

    fn forward<T: Elem>(&self, x: &[T], group_len: usize) -> Vec<T> {
        let stats = group_stats(x, group_len, self.eps);
        x.chunks_exact(group_len)
            .zip(stats)
            .flat_map(|(g, (mean, inv))| g.iter().map(move |&v| T::from_f64((v.to_f64() - mean) * inv)))
            .collect()
    }

    fn backward<T: Elem>(&self, x: &[T], grad: &[T], group_len: usize) -> Vec<T> {
        let stats = group_stats(x, group_len, self.eps);
        let m = group_len as f64;
        let mut out = Vec::with_capacity(x.len());
        for ((xg, gg), (mean, inv)) in x.chunks_exact(group_len).zip(grad.chunks_exact(group_len)).zip(stats) {
            let mut sum_g = 0.0;
            let mut sum_gy = 0.0;
            for (&xv, &gv) in xg.iter().zip(gg) {
                let y = (xv.to_f64() - mean) * inv;
                sum_g += gv.to_f64();
                sum_gy += gv.to_f64() * y;
            }
            let (mg, mgy) = (sum_g / m, sum_gy / m);
            for (&xv, &gv) in xg.iter().zip(gg) {
                let y = (xv.to_f64() - mean) * inv;
                out.push(T::from_f64(inv * (gv.to_f64() - mg - y * mgy)));
            }
        }
        out
    }
}

impl CustomOp1 for GroupNormalize {
    fn name(&self) -> &'static str {
        "group-normalize"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let len = self.group_len(l);
        let out = unary_dispatch!(s, l, "group-normalize", |x| self.forward(x, len));
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let op = GroupNormalizeGrad { groups: self.groups, eps: self.eps };
        Ok(Some(arg.contiguous()?.apply_op2_no_bwd(&grad.contiguous()?, &op)?))
    }
}

struct GroupNormalizeGrad {
    groups: usize,
    eps: f64,
}

impl CustomOp2 for GroupNormalizeGrad {
    fn name(&self) -> &'static str {
        "group-normalize-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let op = GroupNormalize { groups: self.groups, eps: self.eps };
        let len = op.group_len(l1);
        let out = binary_dispatch!(s1, l1, s2, l2, "group-normalize-grad", |x, g| op.backward(x, g, len));
        Ok((out, l1.shape().clone()))
    }
}

/// Normalizes each of `groups` channel groups of every sample to zero mean
/// and unit variance.
pub fn group_normalize(x: &Tensor, groups: usize, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(GroupNormalize { groups, eps })?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var, D};

    fn input(shape: &[usize], seed: u64) -> Var {
        use rand::Rng;
        let mut r = crate::rng::stream(seed, crate::rng::Domain::Step, 0);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        Var::from_tensor(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap()).unwrap()
    }

    /// Compares values and input gradients (under a random linear probe) of
    /// a fused op with a composite reference.
    fn check(shape: &[usize], fused: impl Fn(&Tensor) -> Tensor, reference: impl Fn(&Tensor) -> Tensor) {
        let x = input(shape, 1);
        let a = fused(x.as_tensor());
        let b = reference(x.as_tensor());
        assert_eq!(a.dims(), b.dims());
        let probe = input(a.dims(), 2);
        let diff = |p: &Tensor, q: &Tensor| -> f64 { (p - q).unwrap().abs().unwrap().max_all().unwrap().to_scalar().unwrap() };
        assert!(diff(&a, &b) < 1e-10);
        let ga = (a * probe.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (b * probe.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap();
        assert!(diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-10);
    }

    #[test]
    fn im2col_matches_shifted_slices() {
        for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
            check(
                &[2, 3, 7, 6],
                |x| im2col(x, k, s, p).unwrap().0,
                |x| {
                    let (n, c, h, w) = x.dims4().unwrap();
                    let (ho, wo) = ((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1);
                    let xp = x.pad_with_zeros(2, p, p + s).unwrap().pad_with_zeros(3, p, p + s).unwrap();
                    let mut rows = Vec::new();
                    for ci in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let ys: Vec<u32> = (0..ho).map(|o| (o * s + ky) as u32).collect();
                                let xs: Vec<u32> = (0..wo).map(|o| (o * s + kx) as u32).collect();
                                let ys = Tensor::new(ys, &Device::Cpu).unwrap();
                                let xs = Tensor::new(xs, &Device::Cpu).unwrap();
                                let v = xp.narrow(1, ci, 1).unwrap().contiguous().unwrap().index_select(&ys, 2).unwrap().index_select(&xs, 3).unwrap();
                                rows.push(v.reshape((1, n * ho * wo)).unwrap());
                            }
                        }
                    }
                    Tensor::cat(&rows, 0).unwrap()
                },
            );
        }
    }

    #[test]
    fn silu_matches_composite() {
        check(&[3, 4, 5], |x| silu(x).unwrap(), |x| (x * sigmoid_ref(x)).unwrap());
    }

    fn sigmoid_ref(x: &Tensor) -> Tensor {
        (x.neg().unwrap().exp().unwrap() + 1.0).unwrap().recip().unwrap()
    }

    #[test]
    fn group_normalize_matches_composite() {
        check(
            &[2, 6, 3, 4],
            |x| group_normalize(x, 3, 1e-5).unwrap(),
            |x| {
                let g = x.reshape((2, 3, 24)).unwrap();
                let mean = g.mean_keepdim(D::Minus1).unwrap();
                let c = g.broadcast_sub(&mean).unwrap();
                let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
                c.broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap()).unwrap().reshape((2, 6, 3, 4)).unwrap()
            },
        );
    }

    #[test]
    fn f32_path() {
        let x = Tensor::new(&[[-1f32, 0.0, 2.0]], &Device::Cpu).unwrap();
        let y: Vec<Vec<f32>> = silu(&x).unwrap().to_vec2().unwrap();
        assert!((y[0][2] - 2.0 / (1.0 + (-2f32).exp())).abs() < 1e-6);
        assert_eq!(silu(&x).unwrap().dtype(), DType::F32);
    }
}
