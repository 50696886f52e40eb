//! Forward and backward kernels for the differentiable primitives.
//!
//! Kernels are plain functions over tensors; [`crate::graph`] wires them into
//! the tape and eager backends. Every reduction accumulates in `f64` with a
//! fixed summation order, so results are bit-deterministic.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

fn to_f64<T: Real>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.to_f64()).collect()
}

fn from_f64<T: Real>(v: Vec<f64>) -> Vec<T> {
    v.into_iter().map(T::from_f64).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub input: Shape,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: Shape, weight: Shape, bias: Shape, stride: usize, pad: usize) -> Result<Self> {
        if weight.c != input.c {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input,
                rhs: weight,
            });
        }
        if weight.h != weight.w {
            return Err(Error::InvalidShape(format!(
                "conv2d: kernel must be square, got {weight}"
            )));
        }
        if bias.numel() != weight.n {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                lhs: weight,
                rhs: bias,
            });
        }
        if stride == 0 {
            return Err(Error::InvalidShape("conv2d: stride must be >= 1".into()));
        }
        let k = weight.h;
        if input.h + 2 * pad < k || input.w + 2 * pad < k {
            return Err(Error::ShapeMismatch {
                op: "conv2d (kernel larger than padded input)",
                lhs: input,
                rhs: weight,
            });
        }
        Ok(ConvGeometry {
            input,
            c_out: weight.n,
            k,
            stride,
            pad,
            out_h: (input.h + 2 * pad - k) / stride + 1,
            out_w: (input.w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn output(&self) -> Shape {
        Shape::new(self.input.n, self.c_out, self.out_h, self.out_w)
    }
}

/// Rows of `A` per micro-tile.
const MR: usize = 4;
/// Columns per packed panel.
const NR: usize = 8;
/// Pixels per weight-gradient pass; bounds the patch buffer.
const PIXEL_CHUNK: usize = 2048;

/// `acc[j][t] += sum_r a[j][r] * b[r][t]`, with `r` ascending, so every
/// accumulator sees its terms in a fixed order. `b` is an `R x NR` panel.
#[inline(always)]
fn micro_tile(a: [&[f64]; MR], b: &[f64], acc: &mut [[f64; NR]; MR]) {
    let r = b.len() / NR;
    let a = a.map(|row| &row[..r]);
    for (i, bp) in b.chunks_exact(NR).enumerate() {
        let bp: &[f64; NR] = bp.try_into().expect("panel width");
        for j in 0..MR {
            let av = a[j][i];
            for t in 0..NR {
                acc[j][t] += av * bp[t];
            }
        }
    }
}

/// Input offsets (relative to a channel plane) of the output pixels
/// `p0..p0 + NR`, or `None` past the end.
struct PixelBlock {
    iy: [isize; NR],
    ix: [isize; NR],
    live: usize,
}

impl PixelBlock {
    fn new(g: &ConvGeometry, p0: usize) -> Self {
        let ohw = g.out_h * g.out_w;
        let live = NR.min(ohw - p0);
        let mut iy = [0isize; NR];
        let mut ix = [0isize; NR];
        for t in 0..live {
            let p = p0 + t;
            iy[t] = ((p / g.out_w) * g.stride) as isize - g.pad as isize;
            ix[t] = ((p % g.out_w) * g.stride) as isize - g.pad as isize;
        }
        PixelBlock { iy, ix, live }
    }

    /// Flat offset within a plane of input tap `(ky, kx)` for column `t`.
    #[inline(always)]
    fn tap(&self, s: Shape, t: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = self.iy[t] + ky as isize;
        let x = self.ix[t] + kx as isize;
        (t < self.live && y >= 0 && (y as usize) < s.h && x >= 0 && (x as usize) < s.w).then(|| y as usize * s.w + x as usize)
    }
}

/// Gather the `K x NR` patch panel (rows in `(ci, ky, kx)` order) for one
/// pixel block of image `xn`.
fn pack_patches(xn: &[f64], g: &ConvGeometry, blk: &PixelBlock, panel: &mut [f64]) {
    let s = g.input;
    let k = g.k;
    let mut r = 0;
    for ci in 0..s.c {
        let xc = &xn[ci * s.plane()..(ci + 1) * s.plane()];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut panel[r * NR..(r + 1) * NR];
                for (t, v) in row.iter_mut().enumerate() {
                    *v = blk.tap(s, t, ky, kx).map_or(0.0, |i| xc[i]);
                }
                r += 1;
            }
        }
    }
}

/// Cross-correlation with zero padding. Each output element is
/// `bias + sum over (ci, ky, kx)` accumulated in that order in `f64`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, pad)?;
    let s = g.input;
    let kk = s.c * g.k * g.k;
    let ohw = g.out_h * g.out_w;
    let x64 = to_f64(x.data());
    let mut w64 = to_f64(w.data());
    // Pad the weight rows to a multiple of MR with zero rows.
    let rows = g.c_out.div_ceil(MR) * MR;
    w64.resize(rows * kk, 0.0);
    let bias: Vec<f64> = b.data().iter().map(|v| v.to_f64()).chain(std::iter::repeat(0.0)).take(rows).collect();
    let mut out = vec![T::ZERO; g.output().numel()];
    let mut panel = vec![0.0f64; kk * NR];

    for n in 0..s.n {
        let xn = &x64[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
        for p0 in (0..ohw).step_by(NR) {
            let blk = PixelBlock::new(&g, p0);
            pack_patches(xn, &g, &blk, &mut panel);
            for co0 in (0..g.c_out).step_by(MR) {
                let mut acc = [[0.0f64; NR]; MR];
                for (j, a) in acc.iter_mut().enumerate() {
                    a.fill(bias[co0 + j]);
                }
                let a: [&[f64]; MR] = std::array::from_fn(|j| &w64[(co0 + j) * kk..(co0 + j + 1) * kk]);
                micro_tile(a, &panel, &mut acc);
                for (j, a) in acc.iter().enumerate().take(g.c_out - co0) {
                    let base = (n * g.c_out + co0 + j) * ohw + p0;
                    for (o, &v) in out[base..base + blk.live].iter_mut().zip(a) {
                        *o = T::from_f64(v);
                    }
                }
            }
        }
    }
    Tensor::new(g.output(), out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    grad_out: &[T],
    stride: usize,
    pad: usize,
    need_input: bool,
    need_params: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let s = x.shape();
    let ws = w.shape();
    let bias_shape = Shape::new(ws.n, 1, 1, 1);
    let g = ConvGeometry::new(s, ws, bias_shape, stride, pad).expect("forward validated the geometry");
    let (c_out, k) = (g.c_out, g.k);
    let kk = s.c * k * k;
    let ohw = g.out_h * g.out_w;
    let g64 = to_f64(grad_out);

    let gx = need_input.then(|| {
        // Column gradients are W^T * G; scatter each back onto its input tap.
        let krows = kk.div_ceil(MR) * MR;
        let mut wt = vec![0.0f64; krows * c_out];
        for (co, wrow) in w.data().chunks_exact(kk).enumerate() {
            for (r, v) in wrow.iter().enumerate() {
                wt[r * c_out + co] = v.to_f64();
            }
        }
        let mut gx = vec![0.0f64; s.numel()];
        let mut panel = vec![0.0f64; c_out * NR];
        for n in 0..s.n {
            let gn = &g64[n * c_out * ohw..(n + 1) * c_out * ohw];
            let gxn = &mut gx[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
            for p0 in (0..ohw).step_by(NR) {
                let blk = PixelBlock::new(&g, p0);
                for co in 0..c_out {
                    let row = &mut panel[co * NR..(co + 1) * NR];
                    row.fill(0.0);
                    row[..blk.live].copy_from_slice(&gn[co * ohw + p0..co * ohw + p0 + blk.live]);
                }
                for r0 in (0..kk).step_by(MR) {
                    let mut acc = [[0.0f64; NR]; MR];
                    let a: [&[f64]; MR] = std::array::from_fn(|j| &wt[(r0 + j) * c_out..(r0 + j + 1) * c_out]);
                    micro_tile(a, &panel, &mut acc);
                    for (j, a) in acc.iter().enumerate().take(kk - r0) {
                        let r = r0 + j;
                        let (ci, ky, kx) = (r / (k * k), (r / k) % k, r % k);
                        let plane = &mut gxn[ci * s.plane()..(ci + 1) * s.plane()];
                        for (t, &v) in a.iter().enumerate() {
                            if let Some(i) = blk.tap(s, t, ky, kx) {
                                plane[i] += v;
                            }
                        }
                    }
                }
            }
        }
        from_f64(gx)
    });

    let (gw, gb) = if need_params {
        // gW = G * cols^T: rows of G against panels of transposed patches.
        let x64 = to_f64(x.data());
        let rows = c_out.div_ceil(MR) * MR;
        let mut gpad = vec![0.0f64; rows * PIXEL_CHUNK.min(ohw)];
        let mut gw = vec![0.0f64; c_out * kk];
        let mut gb = vec![0.0f64; c_out];
        let mut patches = vec![0.0f64; kk * NR];
        let mut cols = vec![0.0f64; kk * PIXEL_CHUNK.min(ohw)];
        let mut panel = vec![0.0f64; PIXEL_CHUNK.min(ohw) * NR];
        for n in 0..s.n {
            let gn = &g64[n * c_out * ohw..(n + 1) * c_out * ohw];
            for co in 0..c_out {
                gb[co] += gn[co * ohw..(co + 1) * ohw].iter().sum::<f64>();
            }
            let xn = &x64[n * s.c * s.plane()..(n + 1) * s.c * s.plane()];
            for q0 in (0..ohw).step_by(PIXEL_CHUNK) {
                let np = PIXEL_CHUNK.min(ohw - q0);
                for co in 0..c_out {
                    gpad[co * np..(co + 1) * np].copy_from_slice(&gn[co * ohw + q0..co * ohw + q0 + np]);
                }
                // Patch rows for this chunk of pixels, laid out `[r][p]`.
                for p0 in (0..np).step_by(NR) {
                    let blk = PixelBlock::new(&g, q0 + p0);
                    pack_patches(xn, &g, &blk, &mut patches);
                    for r in 0..kk {
                        cols[r * np + p0..r * np + p0 + blk.live].copy_from_slice(&patches[r * NR..r * NR + blk.live]);
                    }
                }
                for r0 in (0..kk).step_by(NR) {
                    let live = NR.min(kk - r0);
                    for p in 0..np {
                        let dst = &mut panel[p * NR..(p + 1) * NR];
                        for (t, d) in dst.iter_mut().enumerate() {
                            *d = if t < live { cols[(r0 + t) * np + p] } else { 0.0 };
                        }
                    }
                    for co0 in (0..c_out).step_by(MR) {
                        let mut acc = [[0.0f64; NR]; MR];
                        let a: [&[f64]; MR] = std::array::from_fn(|j| &gpad[(co0 + j) * np..(co0 + j + 1) * np]);
                        micro_tile(a, &panel[..np * NR], &mut acc);
                        for (j, a) in acc.iter().enumerate().take(c_out - co0) {
                            let dst = &mut gw[(co0 + j) * kk + r0..(co0 + j) * kk + r0 + live];
                            for (d, &v) in dst.iter_mut().zip(a) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
        (Some(from_f64(gw)), Some(from_f64(gb)))
    } else {
        (None, None)
    };
    (gx, gw, gb)
}

/// 2x2 max-pool, stride 2. Also returns, per output element, the flat input
/// index that won (first in row-major window order on ties).
pub fn maxpool2d<T: Real>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<u32>)> {
    let s = x.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(Error::OddSpatial {
            op: "maxpool2d",
            h: s.h,
            w: s.w,
        });
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut arg = Vec::with_capacity(out_shape.numel());
    let d = x.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for oy in 0..out_shape.h {
            for ox in 0..out_shape.w {
                let mut best = base + 2 * oy * s.w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * s.w + 2 * ox + dx;
                    if d[i] > d[best] {
                        best = i;
                    }
                }
                out.push(d[best]);
                arg.push(best as u32);
            }
        }
    }
    Ok((Tensor::new(out_shape, out)?, arg))
}

pub fn maxpool2d_backward<T: Real>(input: Shape, argmax: &[u32], grad_out: &[T]) -> Vec<T> {
    let mut g = vec![0.0f64; input.numel()];
    for (&i, &go) in argmax.iter().zip(grad_out) {
        g[i as usize] += go.to_f64();
    }
    from_f64(g)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let out_shape = Shape::new(s.n, s.c, s.h * 2, s.w * 2);
    let d = x.data();
    let mut out = Vec::with_capacity(out_shape.numel());
    for nc in 0..s.n * s.c {
        for oy in 0..out_shape.h {
            let row = &d[nc * s.plane() + (oy / 2) * s.w..][..s.w];
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
    }
    Tensor::new(out_shape, out).expect("upsample shape")
}

pub fn upsample_nearest_backward<T: Real>(input: Shape, grad_out: &[T]) -> Vec<T> {
    let ow = input.w * 2;
    let mut g = vec![T::ZERO; input.numel()];
    for nc in 0..input.n * input.c {
        for y in 0..input.h {
            for x in 0..input.w {
                let base = nc * 4 * input.plane();
                let r0 = base + (2 * y) * ow + 2 * x;
                let r1 = r0 + ow;
                let sum = grad_out[r0].to_f64() + grad_out[r0 + 1].to_f64() + grad_out[r1].to_f64() + grad_out[r1 + 1].to_f64();
                g[nc * input.plane() + y * input.w + x] = T::from_f64(sum);
            }
        }
    }
    g
}

pub fn concat_channels<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
        return Err(Error::ShapeMismatch {
            op: "concat_channels",
            lhs: sa,
            rhs: sb,
        });
    }
    let out_shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
    let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..sa.n {
        out.extend_from_slice(&a.data()[n * pa..(n + 1) * pa]);
        out.extend_from_slice(&b.data()[n * pb..(n + 1) * pb]);
    }
    Tensor::new(out_shape, out)
}

pub fn concat_channels_backward<T: Real>(sa: Shape, sb: Shape, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let (pa, pb) = (sa.c * sa.plane(), sb.c * sb.plane());
    let mut ga = Vec::with_capacity(sa.numel());
    let mut gb = Vec::with_capacity(sb.numel());
    for n in 0..sa.n {
        let base = n * (pa + pb);
        ga.extend_from_slice(&grad_out[base..base + pa]);
        gb.extend_from_slice(&grad_out[base + pa..base + pa + pb]);
    }
    (ga, gb)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Gradient is zero where the input is `<= 0`.
pub fn relu_backward<T: Real>(x: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    x.data()
        .iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect()
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::from_f64(1.0 / (1.0 + (-v.to_f64()).exp())))
}

pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    y.data()
        .iter()
        .zip(grad_out)
        .map(|(&y, &g)| {
            let y = y.to_f64();
            T::from_f64(g.to_f64() * y * (1.0 - y))
        })
        .collect()
}

/// Per-(n, c) spatial mean, shape (n, c, 1, 1).
pub fn channel_mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let data = x
        .data()
        .chunks_exact(p)
        .map(|ch| T::from_f64(ch.iter().map(|v| v.to_f64()).sum::<f64>() / p as f64))
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("moment shape")
}

/// Per-(n, c) `sqrt(population variance + eps)`, shape (n, c, 1, 1).
pub fn channel_std<T: Real>(x: &Tensor<T>, eps: f64) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let data = x
        .data()
        .chunks_exact(p)
        .map(|ch| {
            let (_, var) = moments64(ch);
            T::from_f64((var + eps).sqrt())
        })
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("moment shape")
}

fn moments64<T: Real>(ch: &[T]) -> (f64, f64) {
    let p = ch.len() as f64;
    let mean = ch.iter().map(|v| v.to_f64()).sum::<f64>() / p;
    let var = ch
        .iter()
        .map(|v| {
            let d = v.to_f64() - mean;
            d * d
        })
        .sum::<f64>()
        / p;
    (mean, var)
}

pub fn channel_mean_backward<T: Real>(input: Shape, grad_out: &[T]) -> Vec<T> {
    let p = input.plane();
    let mut g = Vec::with_capacity(input.numel());
    for &go in grad_out {
        let v = T::from_f64(go.to_f64() / p as f64);
        g.extend(std::iter::repeat_n(v, p));
    }
    g
}

/// `d std / d x_i = (x_i - mean) / (N * std)`.
pub fn channel_std_backward<T: Real>(x: &Tensor<T>, std: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let p = x.shape().plane();
    let mut g = Vec::with_capacity(x.numel());
    for ((ch, &sd), &go) in x.data().chunks_exact(p).zip(std.data()).zip(grad_out) {
        let (mean, _) = moments64(ch);
        let scale = go.to_f64() / (p as f64 * sd.to_f64());
        g.extend(ch.iter().map(|v| T::from_f64((v.to_f64() - mean) * scale)));
    }
    g
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
            BinaryOp::Div => a / b,
        }
    }
}

/// True when `b` broadcasts over the spatial dims of `a` as (n, c, 1, 1).
/// Errors when the shapes are neither equal nor channel-broadcastable.
pub fn broadcast_kind(op: BinaryOp, a: Shape, b: Shape) -> Result<bool> {
    if a == b {
        Ok(false)
    } else if b.n == a.n && b.c == a.c && b.h == 1 && b.w == 1 {
        Ok(true)
    } else {
        Err(Error::ShapeMismatch {
            op: op.name(),
            lhs: a,
            rhs: b,
        })
    }
}

pub fn binary<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let bcast = broadcast_kind(op, a.shape(), b.shape())?;
    let p = if bcast { a.shape().plane() } else { 1 };
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| T::from_f64(op.apply(x.to_f64(), bd[i / p].to_f64())))
        .collect();
    Tensor::new(a.shape(), data)
}

pub fn binary_backward<T: Real>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>, grad_out: &[T]) -> (Vec<T>, Vec<T>) {
    let bcast = a.shape() != b.shape();
    let p = if bcast { a.shape().plane() } else { 1 };
    let (ad, bd) = (a.data(), b.data());
    let mut ga = Vec::with_capacity(ad.len());
    let mut gb = vec![0.0f64; bd.len()];
    for (i, (&x, &g)) in ad.iter().zip(grad_out).enumerate() {
        let (x, y, g) = (x.to_f64(), bd[i / p].to_f64(), g.to_f64());
        let (dx, dy) = match op {
            BinaryOp::Add => (g, g),
            BinaryOp::Sub => (g, -g),
            BinaryOp::Mul => (g * y, g * x),
            BinaryOp::Div => (g / y, -g * x / (y * y)),
        };
        ga.push(T::from_f64(dx));
        gb[i / p] += dy;
    }
    (ga, from_f64(gb))
}

/// `x * scale + shift` elementwise.
pub fn affine_scalar<T: Real>(x: &Tensor<T>, scale: f64, shift: f64) -> Tensor<T> {
    x.map(|v| T::from_f64(v.to_f64() * scale + shift))
}

pub fn sum<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::from_f64(x.data().iter().map(|v| v.to_f64()).sum()))
}

pub fn mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(T::from_f64(
        x.data().iter().map(|v| v.to_f64()).sum::<f64>() / x.numel() as f64,
    ))
}

/// Per-sample Gram matrix `F F^T` of the (c, h*w) flattening, shape (n, 1, c, c).
pub fn gram<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let p = s.plane();
    let x64 = to_f64(x.data());
    let mut out = vec![T::ZERO; s.n * s.c * s.c];
    for n in 0..s.n {
        let f = &x64[n * s.c * p..(n + 1) * s.c * p];
        let g = &mut out[n * s.c * s.c..(n + 1) * s.c * s.c];
        for i in 0..s.c {
            let fi = &f[i * p..(i + 1) * p];
            for j in i..s.c {
                let fj = &f[j * p..(j + 1) * p];
                let v = T::from_f64(fi.iter().zip(fj).map(|(a, b)| a * b).sum());
                g[i * s.c + j] = v;
                g[j * s.c + i] = v;
            }
        }
    }
    Tensor::new(Shape::new(s.n, 1, s.c, s.c), out).expect("gram shape")
}

/// `dF_i = sum_j (dG_ij + dG_ji) F_j`.
pub fn gram_backward<T: Real>(x: &Tensor<T>, grad_out: &[T]) -> Vec<T> {
    let s = x.shape();
    let p = s.plane();
    let x64 = to_f64(x.data());
    let mut gx = vec![0.0f64; x.numel()];
    for n in 0..s.n {
        let f = &x64[n * s.c * p..(n + 1) * s.c * p];
        let dg = &grad_out[n * s.c * s.c..(n + 1) * s.c * s.c];
        for i in 0..s.c {
            let dst = &mut gx[(n * s.c + i) * p..(n * s.c + i + 1) * p];
            for j in 0..s.c {
                let coef = dg[i * s.c + j].to_f64() + dg[j * s.c + i].to_f64();
                if coef == 0.0 {
                    continue;
                }
                for (d, &v) in dst.iter_mut().zip(&f[j * p..(j + 1) * p]) {
                    *d += coef * v;
                }
            }
        }
    }
    from_f64(gx)
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable per-channel filtering over the valid region only (no padding):
/// rows first, then columns.
pub fn blur_valid<T: Real>(x: &Tensor<T>, taps: &[f64]) -> Result<Tensor<T>> {
    let s = x.shape();
    let k = taps.len();
    if s.h < k || s.w < k {
        return Err(Error::InvalidShape(format!(
            "blur window {k} larger than image {s}"
        )));
    }
    let (oh, ow) = (s.h - k + 1, s.w - k + 1);
    let out_shape = Shape::new(s.n, s.c, oh, ow);
    let mut out = Vec::with_capacity(out_shape.numel());
    let mut tmp = vec![0.0f64; s.h * ow];
    for ch in x.data().chunks_exact(s.plane()) {
        for y in 0..s.h {
            let row = &ch[y * s.w..(y + 1) * s.w];
            for ox in 0..ow {
                tmp[y * ow + ox] = taps.iter().zip(&row[ox..ox + k]).map(|(t, v)| t * v.to_f64()).sum();
            }
        }
        for oy in 0..oh {
            for ox in 0..ow {
                let v: f64 = taps.iter().enumerate().map(|(t, w)| w * tmp[(oy + t) * ow + ox]).sum();
                out.push(T::from_f64(v));
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn blur_valid_backward<T: Real>(input: Shape, taps: &[f64], grad_out: &[T]) -> Vec<T> {
    let k = taps.len();
    let (oh, ow) = (input.h - k + 1, input.w - k + 1);
    let mut gx = vec![0.0f64; input.numel()];
    let mut tmp = vec![0.0f64; input.h * ow];
    for (nc, go) in grad_out.chunks_exact(oh * ow).enumerate() {
        tmp.fill(0.0);
        for oy in 0..oh {
            for ox in 0..ow {
                let g = go[oy * ow + ox].to_f64();
                for (t, w) in taps.iter().enumerate() {
                    tmp[(oy + t) * ow + ox] += w * g;
                }
            }
        }
        let dst = &mut gx[nc * input.plane()..(nc + 1) * input.plane()];
        for y in 0..input.h {
            for ox in 0..ow {
                let g = tmp[y * ow + ox];
                for (t, w) in taps.iter().enumerate() {
                    dst[y * input.w + ox + t] += w * g;
                }
            }
        }
    }
    from_f64(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f32]) -> Tensor<f32> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        let y = conv2d(&x, &t([1, 1, 1, 1], &[1.]), &t([1, 1, 1, 1], &[0.]), 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_input_passes_bias() {
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        let w = Tensor::full([2, 3, 3, 3], 0.7f32);
        let b = t([2, 1, 1, 1], &[0.5, 0.5]);
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 8, 8));
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn conv_rejects_channel_mismatch_naming_both_shapes() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([2, 4, 3, 3]);
        let err = conv2d(&x, &w, &Tensor::zeros([2, 1, 1, 1]), 1, 1).unwrap_err().to_string();
        assert!(err.contains("1x3x4x4") && err.contains("2x4x3x3"), "{err}");
    }

    #[test]
    fn strided_output_shape() {
        let x = Tensor::<f32>::zeros([1, 1, 7, 6]);
        let w = Tensor::<f32>::zeros([1, 1, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros([1, 1, 1, 1]), 2, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 3));
    }

    #[test]
    fn maxpool_examples() {
        let (y, _) = maxpool2d(&t([1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(y.data(), &[4.]);
        let (y, _) = maxpool2d(&Tensor::full([1, 1, 4, 4], 7.0f32)).unwrap();
        assert_eq!(y.data(), &[7.; 4]);
        assert!(matches!(
            maxpool2d(&Tensor::<f32>::zeros([1, 1, 3, 4])),
            Err(Error::OddSpatial { .. })
        ));
    }

    #[test]
    fn maxpool_tie_goes_to_first_index() {
        let x = Tensor::full([1, 1, 2, 2], 1.0f32);
        let (_, arg) = maxpool2d(&x).unwrap();
        assert_eq!(arg, vec![0]);
        let g = maxpool2d_backward(x.shape(), &arg, &[1.0f32]);
        assert_eq!(g, vec![1., 0., 0., 0.]);
    }

    #[test]
    fn upsample_examples() {
        assert_eq!(upsample_nearest(&t([1, 1, 1, 1], &[5.])).data(), &[5.; 4]);
        let y = upsample_nearest(&t([1, 1, 2, 2], &[1., 2., 3., 4.]));
        assert_eq!(
            y.data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
        let g = upsample_nearest_backward(Shape::new(1, 1, 1, 1), &[1.0f32, 2., 3., 4.]);
        assert_eq!(g, vec![10.]);
    }

    #[test]
    fn concat_example_and_mismatch() {
        let c = concat_channels(&t([1, 2, 1, 1], &[1., 2.]), &t([1, 3, 1, 1], &[3., 4., 5.])).unwrap();
        assert_eq!(c.data(), &[1., 2., 3., 4., 5.]);
        assert!(concat_channels(&Tensor::<f32>::zeros([1, 1, 2, 2]), &Tensor::zeros([1, 1, 2, 4])).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = t([1, 1, 1, 3], &[-1., 0., 2.]);
        assert_eq!(relu(&x).data(), &[0., 0., 2.]);
        assert_eq!(relu(&relu(&x)).data(), relu(&x).data());
        assert_eq!(relu_backward(&x, &[1., 1., 1.]), vec![0., 0., 1.]);
    }

    #[test]
    fn moments_examples() {
        let x = t([1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(channel_mean(&x).item(), 2.5);
        assert_eq!(channel_std(&x, 0.0).item(), 1.25f64.sqrt() as f32);
        let k = Tensor::full([1, 1, 3, 3], 4.0f64);
        assert_eq!(channel_mean(&k).item(), 4.0);
        assert_eq!(channel_std(&k, 1e-5).item(), 1e-5f64.sqrt());
    }

    #[test]
    fn moments_ignore_spatial_order() {
        let a = t([1, 1, 2, 3], &[0.3, -1., 2., 5., 0.1, 0.7]);
        let b = t([1, 1, 2, 3], &[5., 0.7, 0.1, -1., 0.3, 2.]);
        assert_eq!(channel_mean(&a), channel_mean(&b));
        assert_eq!(channel_std(&a, 1e-5), channel_std(&b, 1e-5));
    }

    #[test]
    fn binary_broadcast_shapes() {
        let a = Tensor::<f32>::full([2, 3, 4, 4], 2.0);
        let b = Tensor::<f32>::full([2, 3, 1, 1], 4.0);
        assert!(binary(BinaryOp::Div, &a, &b).unwrap().data().iter().all(|&v| v == 0.5));
        assert!(binary(BinaryOp::Add, &b, &a).is_err());
    }

    #[test]
    fn gram_hand_case() {
        let g = gram(&t([1, 2, 1, 2], &[1., 2., 3., 4.]));
        assert_eq!(g.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(g.data(), &[5., 11., 11., 25.]);
        assert!(gram(&Tensor::<f32>::zeros([1, 3, 2, 2])).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gaussian_taps_normalised_and_symmetric() {
        let taps = gaussian_taps(11, 1.5);
        assert!((taps.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(taps[i], taps[10 - i]);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let x = Tensor::full([1, 2, 12, 13], 0.25f32);
        let y = blur_valid(&x, &gaussian_taps(11, 1.5)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 2, 3));
        assert!(y.data().iter().all(|&v| v == 0.25));
    }
}
