//! Direct layer kernels (no autodiff bookkeeping).
//!
//! Convolutions lower to one GEMM over the whole batch through an im2col
//! buffer laid out as `[C·k·k, N·H'·W']`. Kernels are stored
//! `[C_out, C_in, k, k]` for `conv2d`; `conv2d_transpose` takes the kernel of
//! the convolution it is the adjoint of, i.e. `[C_in, C_out, k, k]` from its
//! own point of view.

use crate::error::{dim_err, Result};
use crate::par;

use super::Tensor;

/// Square-kernel convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub const fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        ConvGeom { kernel, stride, pad }
    }

    /// Output extent of a forward convolution over `n` input positions.
    pub fn out_len(&self, n: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 {
            return Err(dim_err!("kernel and stride must be positive: {self:?}"));
        }
        if n + 2 * self.pad < self.kernel {
            return Err(dim_err!("input extent {n} too small for {self:?}"));
        }
        Ok((n + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    /// Output extent of the transposed convolution. `out_pad` selects among
    /// the `stride` input sizes that a forward convolution maps to `n`.
    pub fn transpose_out_len(&self, n: usize, out_pad: usize) -> Result<usize> {
        if self.stride == 0 || self.kernel == 0 || n == 0 {
            return Err(dim_err!("degenerate transposed geometry {self:?} on {n}"));
        }
        if out_pad >= self.stride {
            return Err(dim_err!("output padding {out_pad} must be below stride {}", self.stride));
        }
        let full = (n - 1) * self.stride + self.kernel + out_pad;
        if full < 2 * self.pad + 1 {
            return Err(dim_err!("padding {} consumes the whole output", self.pad));
        }
        let out = full - 2 * self.pad;
        if self.out_len(out)? != n {
            return Err(dim_err!("transposed geometry {self:?} with out_pad {out_pad} is inconsistent"));
        }
        Ok(out)
    }
}

/// `c = a·b + beta·c` where `a` is `m×k` and `b` is `k×n`, both addressed
/// through explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let reach = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= reach(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= reach(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every address the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Interpret a rank-3 or rank-4 tensor as `[N, C, H, W]`.
fn nchw(t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [c, h, w] => Ok([1, c, h, w]),
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(dim_err!("expected C×H×W or N×C×H×W, got {:?}", t.shape())),
    }
}

fn with_batch_rank(input: &Tensor, shape: [usize; 4]) -> Vec<usize> {
    if input.rank() == 3 {
        shape[1..].to_vec()
    } else {
        shape.to_vec()
    }
}

struct Plane {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

/// Unfold `[N, C, H, W]` into `[C·k·k, N·oh·ow]`.
fn im2col(x: &[f64], p: &Plane, g: ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let positions = p.oh * p.ow;
    let cols = p.n * positions;
    let mut out = vec![0.0; p.c * k * k * cols];
    par::for_each_chunk_mut(&mut out, cols, |row, buf| {
        let c = row / (k * k);
        let ky = (row / k) % k;
        let kx = row % k;
        for n in 0..p.n {
            let src = &x[(n * p.c + c) * p.h * p.w..(n * p.c + c + 1) * p.h * p.w];
            let dst = &mut buf[n * positions..(n + 1) * positions];
            for oy in 0..p.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= p.h as isize {
                    continue;
                }
                let srow = &src[iy as usize * p.w..(iy as usize + 1) * p.w];
                for ox in 0..p.ow {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < p.w {
                        dst[oy * p.ow + ox] = srow[ix as usize];
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: fold `[C·k·k, N·oh·ow]` back into `[N, C, H, W]`.
fn col2im(col: &[f64], p: &Plane, g: ConvGeom) -> Vec<f64> {
    let k = g.kernel;
    let positions = p.oh * p.ow;
    let cols = p.n * positions;
    let mut out = vec![0.0; p.n * p.c * p.h * p.w];
    par::for_each_chunk_mut(&mut out, p.h * p.w, |plane, dst| {
        let n = plane / p.c;
        let c = plane % p.c;
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &col[row * cols + n * positions..row * cols + (n + 1) * positions];
                for oy in 0..p.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= p.h as isize {
                        continue;
                    }
                    for ox in 0..p.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < p.w {
                            dst[iy as usize * p.w + ix as usize] += src[oy * p.ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

/// `[N, C, P]` → `[C, N·P]`.
fn batch_to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[ch * n * p + b * p..ch * n * p + (b + 1) * p]
                .copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[C, N·P]` → `[N, C, P]`.
fn channel_major_to_batch(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for b in 0..n {
            out[(b * c + ch) * p..(b * c + ch + 1) * p]
                .copy_from_slice(&x[ch * n * p + b * p..ch * n * p + (b + 1) * p]);
        }
    }
    out
}

fn check_kernel(kernels: &Tensor, c_in: usize, g: ConvGeom) -> Result<(usize, usize)> {
    match *kernels.shape() {
        [a, b, kh, kw] if kh == g.kernel && kw == g.kernel => {
            if b != c_in {
                return Err(dim_err!("kernel expects {b} input channels, input has {c_in}"));
            }
            Ok((a, b))
        }
        _ => Err(dim_err!(
            "kernel shape {:?} does not match {}×{} geometry",
            kernels.shape(),
            g.kernel,
            g.kernel
        )),
    }
}

/// Direct 2-D convolution (cross-correlation), no bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, g: ConvGeom) -> Result<Tensor> {
    let [n, c, h, w] = nchw(input)?;
    let (c_out, _) = check_kernel(kernels, c, g)?;
    let (oh, ow) = (g.out_len(h)?, g.out_len(w)?);
    let plane = Plane { n, c, h, w, oh, ow };
    let col = im2col(input.data(), &plane, g);
    let kk = c * g.kernel * g.kernel;
    let cols = n * oh * ow;
    let mut out = vec![0.0; c_out * cols];
    gemm(c_out, kk, cols, kernels.data(), (kk, 1), &col, (cols, 1), &mut out, 0.0);
    let data = channel_major_to_batch(&out, n, c_out, oh * ow);
    Tensor::new(with_batch_rank(input, [n, c_out, oh, ow]), data)
}

/// Gradients of [`conv2d`] w.r.t. its input and kernels.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    g: ConvGeom,
    want_input: bool,
    want_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let [n, c, h, w] = nchw(input)?;
    let (c_out, _) = check_kernel(kernels, c, g)?;
    let (oh, ow) = (g.out_len(h)?, g.out_len(w)?);
    let plane = Plane { n, c, h, w, oh, ow };
    let kk = c * g.kernel * g.kernel;
    let cols = n * oh * ow;
    let gout = batch_to_channel_major(grad_out.data(), n, c_out, oh * ow);

    let grad_kernels = if want_kernels {
        let col = im2col(input.data(), &plane, g);
        let mut gk = vec![0.0; c_out * kk];
        gemm(c_out, cols, kk, &gout, (cols, 1), &col, (1, cols), &mut gk, 0.0);
        Some(Tensor::new(kernels.shape().to_vec(), gk)?)
    } else {
        None
    };
    let grad_input = if want_input {
        let mut gcol = vec![0.0; kk * cols];
        gemm(kk, c_out, cols, kernels.data(), (1, kk), &gout, (cols, 1), &mut gcol, 0.0);
        Some(Tensor::new(input.shape().to_vec(), col2im(&gcol, &plane, g))?)
    } else {
        None
    };
    Ok((grad_input, grad_kernels))
}

/// Transposed convolution: the input-gradient map of [`conv2d`] with the
/// same kernels and geometry. `kernels` is `[C_in, C_out, k, k]`.
pub fn conv2d_transpose(input: &Tensor, kernels: &Tensor, g: ConvGeom, out_pad: usize) -> Result<Tensor> {
    let [n, c_in, h, w] = nchw(input)?;
    let (kc_in, c_out) = match *kernels.shape() {
        [a, b, kh, kw] if kh == g.kernel && kw == g.kernel => (a, b),
        _ => return Err(dim_err!("bad transposed kernel shape {:?}", kernels.shape())),
    };
    if kc_in != c_in {
        return Err(dim_err!("transposed kernel expects {kc_in} input channels, input has {c_in}"));
    }
    let (oh, ow) = (g.transpose_out_len(h, out_pad)?, g.transpose_out_len(w, out_pad)?);
    // The image being produced plays the role of the forward conv's input.
    let plane = Plane { n, c: c_out, h: oh, w: ow, oh: h, ow: w };
    let kk = c_out * g.kernel * g.kernel;
    let cols = n * h * w;
    let xm = batch_to_channel_major(input.data(), n, c_in, h * w);
    let mut col = vec![0.0; kk * cols];
    gemm(kk, c_in, cols, kernels.data(), (1, kk), &xm, (cols, 1), &mut col, 0.0);
    Tensor::new(with_batch_rank(input, [n, c_out, oh, ow]), col2im(&col, &plane, g))
}

/// Gradients of [`conv2d_transpose`] w.r.t. its input and kernels.
pub fn conv2d_transpose_backward(
    input: &Tensor,
    kernels: &Tensor,
    grad_out: &Tensor,
    g: ConvGeom,
    out_pad: usize,
    want_input: bool,
    want_kernels: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let [n, c_in, h, w] = nchw(input)?;
    let c_out = kernels.shape()[1];
    let (oh, ow) = (g.transpose_out_len(h, out_pad)?, g.transpose_out_len(w, out_pad)?);
    let plane = Plane { n, c: c_out, h: oh, w: ow, oh: h, ow: w };
    let kk = c_out * g.kernel * g.kernel;
    let cols = n * h * w;
    let gcol = im2col(grad_out.data(), &plane, g);

    let grad_input = if want_input {
        let mut gx = vec![0.0; c_in * cols];
        gemm(c_in, kk, cols, kernels.data(), (kk, 1), &gcol, (cols, 1), &mut gx, 0.0);
        let data = channel_major_to_batch(&gx, n, c_in, h * w);
        Some(Tensor::new(input.shape().to_vec(), data)?)
    } else {
        None
    };
    let grad_kernels = if want_kernels {
        let xm = batch_to_channel_major(input.data(), n, c_in, h * w);
        let mut gk = vec![0.0; c_in * kk];
        gemm(c_in, cols, kk, &xm, (cols, 1), &gcol, (1, cols), &mut gk, 0.0);
        Some(Tensor::new(kernels.shape().to_vec(), gk)?)
    } else {
        None
    };
    Ok((grad_input, grad_kernels))
}

/// Fully connected map `x·Wᵀ` for `x: [N, D_in]`, `W: [D_out, D_in]`.
pub fn linear(x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let (n, d_in, d_out) = linear_dims(x, weight)?;
    let mut out = vec![0.0; n * d_out];
    gemm(n, d_in, d_out, x.data(), (d_in, 1), weight.data(), (1, d_in), &mut out, 0.0);
    Tensor::new(vec![n, d_out], out)
}

pub fn linear_backward(x: &Tensor, weight: &Tensor, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d_in, d_out) = linear_dims(x, weight)?;
    let mut gx = vec![0.0; n * d_in];
    gemm(n, d_out, d_in, grad_out.data(), (d_out, 1), weight.data(), (d_in, 1), &mut gx, 0.0);
    let mut gw = vec![0.0; d_out * d_in];
    gemm(d_out, n, d_in, grad_out.data(), (1, d_out), x.data(), (d_in, 1), &mut gw, 0.0);
    Ok((Tensor::new(x.shape().to_vec(), gx)?, Tensor::new(weight.shape().to_vec(), gw)?))
}

fn linear_dims(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize)> {
    match (x.shape(), weight.shape()) {
        (&[n, d_in], &[d_out, wd]) if wd == d_in => Ok((n, d_in, d_out)),
        (xs, ws) => Err(dim_err!("linear: input {xs:?} incompatible with weight {ws:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Tensor, k: &Tensor, g: ConvGeom) -> Tensor {
        let [n, c, h, w] = nchw(x).unwrap();
        let co = k.shape()[0];
        let (oh, ow) = (g.out_len(h).unwrap(), g.out_len(w).unwrap());
        let mut out = vec![0.0; n * co * oh * ow];
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for ci in 0..c {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        s += x.data()[((b * c + ci) * h + iy as usize) * w + ix as usize]
                                            * k.data()[((o * c + ci) * g.kernel + ky) * g.kernel + kx];
                                    }
                                }
                            }
                        }
                        out[((b * co + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        Tensor::new(vec![n, co, oh, ow], out).unwrap()
    }

    #[test]
    fn identity_and_window_sum() {
        let x = Tensor::ones(&[1, 3, 3]);
        let id = Tensor::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d(&x, &id, ConvGeom::new(1, 1, 0)).unwrap(), x);
        let sum = conv2d(&x, &Tensor::ones(&[1, 1, 2, 2]), ConvGeom::new(2, 1, 0)).unwrap();
        assert_eq!(sum.shape(), &[1, 2, 2]);
        assert!(sum.data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn table_geometries() {
        let x = Tensor::zeros(&[3, 28, 28]);
        let k = Tensor::zeros(&[64, 3, 3, 3]);
        assert_eq!(conv2d(&x, &k, ConvGeom::new(3, 2, 1)).unwrap().shape(), &[64, 14, 14]);
        let z = Tensor::zeros(&[64, 1, 1]);
        let d8 = Tensor::zeros(&[64, 256, 4, 4]);
        assert_eq!(conv2d_transpose(&z, &d8, ConvGeom::new(4, 1, 0), 0).unwrap().shape(), &[256, 4, 4]);
        let f = Tensor::zeros(&[64, 14, 14]);
        let d11 = Tensor::zeros(&[64, 3, 3, 3]);
        assert_eq!(conv2d_transpose(&f, &d11, ConvGeom::new(3, 2, 1), 1).unwrap().shape(), &[3, 28, 28]);
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(&[2, 5, 5]);
        let k = Tensor::zeros(&[4, 3, 3, 3]);
        assert!(matches!(conv2d(&x, &k, ConvGeom::new(3, 1, 0)), Err(crate::Error::Dimension(_))));
        let g = ConvGeom::new(3, 2, 1);
        assert!(g.transpose_out_len(7, 2).is_err());
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(n, c, h, w, co, k, s, p) in &[(2, 3, 7, 6, 4, 3, 2, 1), (1, 2, 5, 5, 3, 2, 1, 0), (3, 1, 9, 4, 2, 3, 3, 2)] {
            let g = ConvGeom::new(k, s, p);
            let x = random(&[n, c, h, w], &mut rng);
            let kr = random(&[co, c, k, k], &mut rng);
            let fast = conv2d(&x, &kr, g).unwrap();
            let slow = conv_naive(&x, &kr, g);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity_random_geometries() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let k = rng.gen_range(1..=4);
            let s = rng.gen_range(1..=3);
            let p = rng.gen_range(0..=(k - 1) / 2);
            let g = ConvGeom::new(k, s, p);
            let (c, co, n) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(1..=2));
            let h = rng.gen_range(k..k + 8);
            // same remainder mod stride, so one output padding serves both axes
            let w = h + s * rng.gen_range(0..3);
            let (oh, ow) = (g.out_len(h).unwrap(), g.out_len(w).unwrap());
            let op_h = h - ((oh - 1) * s + k - 2 * p);
            let x = random(&[n, c, h, w], &mut rng);
            let kr = random(&[co, c, k, k], &mut rng);
            let y = random(&[n, co, oh, ow], &mut rng);
            let lhs = conv2d(&x, &kr, g).unwrap().dot(&y);
            let xt = conv2d_transpose(&y, &kr, g, op_h).unwrap();
            assert_eq!(xt.shape(), x.shape());
            let rhs = x.dot(&xt);
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn linear_shapes() {
        let x = Tensor::ones(&[2, 3]);
        let w = Tensor::ones(&[4, 3]);
        let y = linear(&x, &w).unwrap();
        assert_eq!(y.shape(), &[2, 4]);
        assert!(y.data().iter().all(|&v| v == 3.0));
        assert!(linear(&x, &Tensor::ones(&[4, 2])).is_err());
    }
}
