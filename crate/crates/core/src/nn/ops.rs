//! Layer kernels: forward and backward passes for one sample at a time,
//! except dense layers which work on the whole batch.

use serde::{Deserialize, Serialize};

use crate::scalar::{gemm, MatRef, Scalar};

/// A trainable tensor plus its lazily allocated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<T>,
    grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, value: Vec<T>) -> Self {
        assert_eq!(dims.iter().product::<usize>(), value.len(), "param dims");
        Self { name: name.into(), dims, value, grad: Vec::new() }
    }

    pub fn filled(name: impl Into<String>, dims: Vec<usize>, v: T) -> Self {
        let len = dims.iter().product();
        Self::new(name, dims, vec![v; len])
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        if self.grad.len() != self.value.len() {
            self.grad = vec![T::zero(); self.value.len()];
        }
        &mut self.grad
    }

    pub fn has_grad(&self) -> bool {
        self.grad.len() == self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }

    pub fn drop_grad(&mut self) {
        self.grad = Vec::new();
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Pads {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Pads {
    pub const fn uniform(p: usize) -> Self {
        Self { top: p, left: p, bottom: p, right: p }
    }

    pub fn is_zero(&self) -> bool {
        *self == Pads::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// TensorFlow-style: output = ceil(input / stride), extra padding at the end.
    Same,
    Valid,
    Explicit(Pads),
}

/// Sliding-window geometry with padding already resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub pads: Pads,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn resolve(
        padding: Padding,
        (in_h, in_w): (usize, usize),
        (kh, kw): (usize, usize),
        (sh, sw): (usize, usize),
    ) -> Option<Self> {
        let pads = match padding {
            Padding::Same => {
                let total = |input: usize, k: usize, s: usize| {
                    let out = input.div_ceil(s);
                    ((out - 1) * s + k).saturating_sub(input)
                };
                let th = total(in_h, kh, sh);
                let tw = total(in_w, kw, sw);
                Pads { top: th / 2, bottom: th - th / 2, left: tw / 2, right: tw - tw / 2 }
            }
            Padding::Valid => Pads::default(),
            Padding::Explicit(p) => p,
        };
        let ph = in_h + pads.top + pads.bottom;
        let pw = in_w + pads.left + pads.right;
        if ph < kh || pw < kw || sh == 0 || sw == 0 {
            return None;
        }
        Some(Self {
            kh,
            kw,
            sh,
            sw,
            pads,
            in_h,
            in_w,
            out_h: (ph - kh) / sh + 1,
            out_w: (pw - kw) / sw + 1,
        })
    }

    /// Range of output columns whose input column `ox*sw + kx - left` is in bounds.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        valid_range(kx, self.pads.left, self.sw, self.in_w, self.out_w)
    }

    #[inline]
    fn valid_rows(&self, ky: usize) -> (usize, usize) {
        valid_range(ky, self.pads.top, self.sh, self.in_h, self.out_h)
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.pads.is_zero()
    }
}

/// Output indices `o` in `[lo, hi)` such that `0 <= o*s + k - pad < input`.
#[inline]
fn valid_range(k: usize, pad: usize, s: usize, input: usize, out: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(s) } else { 0 };
    // o*s + k - pad <= input - 1  =>  o <= (input - 1 + pad - k) / s
    let hi = if input + pad > k { ((input - 1 + pad - k) / s + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], c: usize, win: &Window, col: &mut [T]) {
    let p = win.out_h * win.out_w;
    for ch in 0..c {
        let plane = &x[ch * win.in_h * win.in_w..(ch + 1) * win.in_h * win.in_w];
        for ky in 0..win.kh {
            let (ry0, ry1) = win.valid_rows(ky);
            for kx in 0..win.kw {
                let (rx0, rx1) = win.valid_cols(kx);
                let row = &mut col[((ch * win.kh + ky) * win.kw + kx) * p..][..p];
                row.iter_mut().for_each(|v| *v = T::zero());
                for oy in ry0..ry1 {
                    let iy = oy * win.sh + ky - win.pads.top;
                    let src = &plane[iy * win.in_w..(iy + 1) * win.in_w];
                    let dst = &mut row[oy * win.out_w..(oy + 1) * win.out_w];
                    if win.sw == 1 {
                        if rx0 >= rx1 {
                            continue;
                        }
                        let ix0 = rx0 + kx - win.pads.left;
                        dst[rx0..rx1].copy_from_slice(&src[ix0..ix0 + (rx1 - rx0)]);
                    } else {
                        for ox in rx0..rx1 {
                            dst[ox] = src[ox * win.sw + kx - win.pads.left];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], c: usize, win: &Window, dx: &mut [T]) {
    let p = win.out_h * win.out_w;
    for ch in 0..c {
        let plane = &mut dx[ch * win.in_h * win.in_w..(ch + 1) * win.in_h * win.in_w];
        for ky in 0..win.kh {
            let (ry0, ry1) = win.valid_rows(ky);
            for kx in 0..win.kw {
                let (rx0, rx1) = win.valid_cols(kx);
                let row = &col[((ch * win.kh + ky) * win.kw + kx) * p..][..p];
                for oy in ry0..ry1 {
                    let iy = oy * win.sh + ky - win.pads.top;
                    let dst = &mut plane[iy * win.in_w..(iy + 1) * win.in_w];
                    let src = &row[oy * win.out_w..(oy + 1) * win.out_w];
                    for ox in rx0..rx1 {
                        dst[ox * win.sw + kx - win.pads.left] += src[ox];
                    }
                }
            }
        }
    }
}

/// Standard (groups = 1) 2-D convolution. Weight layout `[cout, cin, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub win: Window,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> Conv2d<T> {
    fn k(&self) -> usize {
        self.cin * self.win.kh * self.win.kw
    }

    pub fn forward(&self, x: &[T], y: &mut [T], scratch: &mut Vec<T>) {
        let p = self.win.out_h * self.win.out_w;
        let col: &[T] = if self.win.is_pointwise() {
            x
        } else {
            scratch.resize(self.k() * p, T::zero());
            im2col(x, self.cin, &self.win, scratch);
            scratch
        };
        gemm(
            T::one(),
            MatRef::new(&self.weight.value, self.cout, self.k()),
            MatRef::new(col, self.k(), p),
            T::zero(),
            y,
        );
        if let Some(b) = &self.bias {
            for (o, bv) in b.value.iter().enumerate() {
                y[o * p..(o + 1) * p].iter_mut().for_each(|v| *v += *bv);
            }
        }
    }

    /// Accumulates parameter gradients and, when `dx` is given, the input gradient.
    pub fn backward(
        &mut self,
        x: &[T],
        dy: &[T],
        dx: Option<&mut [T]>,
        train_params: bool,
        scratch: &mut Vec<T>,
    ) {
        let p = self.win.out_h * self.win.out_w;
        let k = self.k();
        let pointwise = self.win.is_pointwise();
        if train_params {
            let col: &[T] = if pointwise {
                x
            } else {
                scratch.resize(k * p, T::zero());
                im2col(x, self.cin, &self.win, scratch);
                scratch
            };
            let gw = self.weight.grad_mut();
            gemm(T::one(), MatRef::new(dy, self.cout, p), MatRef::new(col, k, p).t(), T::one(), gw);
            if let Some(b) = &mut self.bias {
                let gb = b.grad_mut();
                for (o, g) in gb.iter_mut().enumerate() {
                    *g += dy[o * p..(o + 1) * p].iter().copied().sum::<T>();
                }
            }
        }
        if let Some(dx) = dx {
            let w = MatRef::new(&self.weight.value[..], self.cout, k).t();
            if pointwise {
                gemm(T::one(), w, MatRef::new(dy, self.cout, p), T::one(), dx);
            } else {
                scratch.resize(k * p, T::zero());
                gemm(T::one(), w, MatRef::new(dy, self.cout, p), T::zero(), scratch);
                col2im(scratch, self.cin, &self.win, dx);
            }
        }
    }
}

/// Depthwise convolution (channel multiplier 1). Weight layout `[c, 1, kh, kw]`.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2d<T> {
    pub channels: usize,
    pub win: Window,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
}

impl<T: Scalar> DepthwiseConv2d<T> {
    pub fn forward(&self, x: &[T], y: &mut [T]) {
        let win = &self.win;
        let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
        let kk = win.kh * win.kw;
        for c in 0..self.channels {
            let xin = &x[c * ip..(c + 1) * ip];
            let out = &mut y[c * op..(c + 1) * op];
            let b = self.bias.as_ref().map_or(T::zero(), |b| b.value[c]);
            out.iter_mut().for_each(|v| *v = b);
            for ky in 0..win.kh {
                let (ry0, ry1) = win.valid_rows(ky);
                for kx in 0..win.kw {
                    let (rx0, rx1) = win.valid_cols(kx);
                    let wv = self.weight.value[c * kk + ky * win.kw + kx];
                    for oy in ry0..ry1 {
                        let iy = oy * win.sh + ky - win.pads.top;
                        let src = &xin[iy * win.in_w..(iy + 1) * win.in_w];
                        let dst = &mut out[oy * win.out_w..(oy + 1) * win.out_w];
                        if win.sw == 1 {
                            if rx0 >= rx1 {
                                continue;
                            }
                            let ix0 = rx0 + kx - win.pads.left;
                            let s = &src[ix0..ix0 + (rx1 - rx0)];
                            for (d, sv) in dst[rx0..rx1].iter_mut().zip(s) {
                                *d += wv * *sv;
                            }
                        } else {
                            for ox in rx0..rx1 {
                                dst[ox] += wv * src[ox * win.sw + kx - win.pads.left];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn backward(&mut self, x: &[T], dy: &[T], mut dx: Option<&mut [T]>, train_params: bool) {
        let win = self.win;
        let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
        let kk = win.kh * win.kw;
        for c in 0..self.channels {
            let xin = &x[c * ip..(c + 1) * ip];
            let g = &dy[c * op..(c + 1) * op];
            if train_params {
                if let Some(b) = &mut self.bias {
                    b.grad_mut()[c] += g.iter().copied().sum::<T>();
                }
            }
            for ky in 0..win.kh {
                let (ry0, ry1) = win.valid_rows(ky);
                for kx in 0..win.kw {
                    let (rx0, rx1) = win.valid_cols(kx);
                    let widx = c * kk + ky * win.kw + kx;
                    let wv = self.weight.value[widx];
                    let mut gw = T::zero();
                    for oy in ry0..ry1 {
                        let iy = oy * win.sh + ky - win.pads.top;
                        let grow = &g[oy * win.out_w..(oy + 1) * win.out_w];
                        let src = &xin[iy * win.in_w..(iy + 1) * win.in_w];
                        for ox in rx0..rx1 {
                            gw += grow[ox] * src[ox * win.sw + kx - win.pads.left];
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let drow = &mut dx[c * ip + iy * win.in_w..c * ip + (iy + 1) * win.in_w];
                            for ox in rx0..rx1 {
                                drow[ox * win.sw + kx - win.pads.left] += wv * grow[ox];
                            }
                        }
                    }
                    if train_params {
                        self.weight.grad_mut()[widx] += gw;
                    }
                }
            }
        }
    }
}

/// Batch normalization with fixed running statistics and a trainable affine.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub eps: f64,
    /// When set, `gamma` stays at its loaded value and is not optimized.
    pub fixed_gamma: bool,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub mean: Param<T>,
    pub var: Param<T>,
}

impl<T: Scalar> BatchNorm<T> {
    fn inv_std(&self, c: usize) -> T {
        T::one() / (self.var.value[c] + T::from_f64_lossy(self.eps)).sqrt()
    }

    pub fn forward(&self, x: &[T], y: &mut [T], plane: usize) {
        for c in 0..self.channels {
            let s = self.gamma.value[c] * self.inv_std(c);
            let shift = self.beta.value[c] - self.mean.value[c] * s;
            let (src, dst) = (&x[c * plane..(c + 1) * plane], &mut y[c * plane..(c + 1) * plane]);
            for (d, v) in dst.iter_mut().zip(src) {
                *d = *v * s + shift;
            }
        }
    }

    pub fn backward(&mut self, x: &[T], dy: &[T], dx: Option<&mut [T]>, plane: usize, train: bool) {
        if train {
            for c in 0..self.channels {
                let (m, is) = (self.mean.value[c], self.inv_std(c));
                let (src, g) = (&x[c * plane..(c + 1) * plane], &dy[c * plane..(c + 1) * plane]);
                let mut gg = T::zero();
                let mut gb = T::zero();
                for (v, d) in src.iter().zip(g) {
                    gg += *d * (*v - m) * is;
                    gb += *d;
                }
                self.gamma.grad_mut()[c] += gg;
                self.beta.grad_mut()[c] += gb;
            }
        }
        if let Some(dx) = dx {
            for c in 0..self.channels {
                let s = self.gamma.value[c] * self.inv_std(c);
                let (g, d) = (&dy[c * plane..(c + 1) * plane], &mut dx[c * plane..(c + 1) * plane]);
                for (o, v) in d.iter_mut().zip(g) {
                    *o += *v * s;
                }
            }
        }
    }

    /// Replaces running statistics by the statistics of `batch` (NCHW data, `n` samples).
    pub fn calibrate(&mut self, batch: &[T], n: usize, plane: usize) {
        let count = (n * plane).max(1) as f64;
        for c in 0..self.channels {
            let (mut sum, mut sq) = (0.0f64, 0.0f64);
            for s in 0..n {
                let off = (s * self.channels + c) * plane;
                for v in &batch[off..off + plane] {
                    let v = v.to_f64_lossy();
                    sum += v;
                    sq += v * v;
                }
            }
            let mean = sum / count;
            let var = (sq / count - mean * mean).max(0.0);
            self.mean.value[c] = T::from_f64_lossy(mean);
            self.var.value[c] = T::from_f64_lossy(var);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Relu6,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: &[T], y: &mut [T]) {
        let six = T::from_f64_lossy(6.0);
        for (o, v) in y.iter_mut().zip(x) {
            *o = match self {
                Activation::Relu => v.max(T::zero()),
                Activation::Relu6 => v.max(T::zero()).min(six),
            };
        }
    }

    /// Gradient from the activation output `y`.
    pub fn backward<T: Scalar>(self, y: &[T], dy: &[T], dx: &mut [T]) {
        let six = T::from_f64_lossy(6.0);
        for ((d, o), g) in dx.iter_mut().zip(y).zip(dy) {
            let pass = match self {
                Activation::Relu => *o > T::zero(),
                Activation::Relu6 => *o > T::zero() && *o < six,
            };
            if pass {
                *d += *g;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    /// Average over in-bounds elements only (padding excluded from the count).
    Avg,
}

#[derive(Debug, Clone, Copy)]
pub struct Pool2d {
    pub kind: PoolKind,
    pub channels: usize,
    pub win: Window,
}

impl Pool2d {
    /// Forward; for max pooling `argmax` receives the input index of each output.
    pub fn forward<T: Scalar>(&self, x: &[T], y: &mut [T], mut argmax: Option<&mut [u32]>) {
        let win = &self.win;
        let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
        for c in 0..self.channels {
            for oy in 0..win.out_h {
                for ox in 0..win.out_w {
                    let mut best = T::neg_infinity();
                    let mut best_i = 0u32;
                    let mut sum = T::zero();
                    let mut count = 0usize;
                    for ky in 0..win.kh {
                        let iy = (oy * win.sh + ky) as isize - win.pads.top as isize;
                        if iy < 0 || iy >= win.in_h as isize {
                            continue;
                        }
                        for kx in 0..win.kw {
                            let ix = (ox * win.sw + kx) as isize - win.pads.left as isize;
                            if ix < 0 || ix >= win.in_w as isize {
                                continue;
                            }
                            let idx = iy as usize * win.in_w + ix as usize;
                            let v = x[c * ip + idx];
                            count += 1;
                            sum += v;
                            if v > best {
                                best = v;
                                best_i = idx as u32;
                            }
                        }
                    }
                    let o = c * op + oy * win.out_w + ox;
                    y[o] = match self.kind {
                        PoolKind::Max => best,
                        PoolKind::Avg => sum / T::from_usize(count.max(1)).unwrap(),
                    };
                    if let Some(a) = argmax.as_deref_mut() {
                        a[o] = best_i;
                    }
                }
            }
        }
    }

    pub fn backward<T: Scalar>(&self, dy: &[T], dx: &mut [T], argmax: Option<&[u32]>) {
        let win = &self.win;
        let (ip, op) = (win.in_h * win.in_w, win.out_h * win.out_w);
        for c in 0..self.channels {
            for oy in 0..win.out_h {
                for ox in 0..win.out_w {
                    let o = c * op + oy * win.out_w + ox;
                    match self.kind {
                        PoolKind::Max => {
                            let a = argmax.expect("max pool backward needs argmax");
                            dx[c * ip + a[o] as usize] += dy[o];
                        }
                        PoolKind::Avg => {
                            let y0 = (oy * win.sh) as isize - win.pads.top as isize;
                            let x0 = (ox * win.sw) as isize - win.pads.left as isize;
                            let ys = y0.max(0) as usize..((y0 + win.kh as isize).min(win.in_h as isize)) as usize;
                            let xs = x0.max(0) as usize..((x0 + win.kw as isize).min(win.in_w as isize)) as usize;
                            let count = ys.len() * xs.len();
                            let g = dy[o] / T::from_usize(count.max(1)).unwrap();
                            for iy in ys {
                                for ix in xs.clone() {
                                    dx[c * ip + iy * win.in_w + ix] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Fully connected layer. Weight layout `[out, in]`.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Dense<T> {
    /// `y[n, out] = x[n, in] * W^T + b`.
    pub fn forward(&self, x: &[T], n: usize, y: &mut [T]) {
        for s in 0..n {
            y[s * self.outputs..(s + 1) * self.outputs].copy_from_slice(&self.bias.value);
        }
        gemm(
            T::one(),
            MatRef::new(x, n, self.inputs),
            MatRef::new(&self.weight.value, self.outputs, self.inputs).t(),
            T::one(),
            y,
        );
    }

    pub fn backward(&mut self, x: &[T], dy: &[T], n: usize, dx: Option<&mut [T]>, train: bool) {
        if train {
            let gw = self.weight.grad_mut();
            gemm(
                T::one(),
                MatRef::new(dy, n, self.outputs).t(),
                MatRef::new(x, n, self.inputs),
                T::one(),
                gw,
            );
            let gb = self.bias.grad_mut();
            for s in 0..n {
                for (g, d) in gb.iter_mut().zip(&dy[s * self.outputs..(s + 1) * self.outputs]) {
                    *g += *d;
                }
            }
        }
        if let Some(dx) = dx {
            gemm(
                T::one(),
                MatRef::new(dy, n, self.outputs),
                MatRef::new(&self.weight.value, self.outputs, self.inputs),
                T::one(),
                dx,
            );
        }
    }
}
