//! Shared numeric kernels: bilinear resampling, dilated 2-D convolution and
//! pointwise activations, each with the analytic backward pass the training
//! loop needs.

use crate::grid::{Grid2, Grid3};

/// Precomputed bilinear resampling plan (align-corners-false convention).
///
/// Each output cell holds four source taps; the same plan drives the forward
/// pass and its transpose (backward).
#[derive(Debug, Clone)]
pub struct BilinearPlan {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    // (source cell index, weight) x4 per output cell
    taps: Vec<[(usize, f64); 4]>,
}

fn axis_taps(out: usize, inp: usize, o: usize) -> ((usize, usize), (f64, f64)) {
    let src = (o as f64 + 0.5) * inp as f64 / out as f64 - 0.5;
    let i0f = src.floor();
    let frac = src - i0f;
    let clamp = |v: f64| -> usize { v.max(0.0).min(inp as f64 - 1.0) as usize };
    let i0 = clamp(i0f);
    let i1 = clamp(i0f + 1.0);
    ((i0, i1), (1.0 - frac, frac))
}

impl BilinearPlan {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        assert!(in_h > 0 && in_w > 0 && out_h > 0 && out_w > 0);
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oi in 0..out_h {
            let ((r0, r1), (wr0, wr1)) = axis_taps(out_h, in_h, oi);
            for oj in 0..out_w {
                let ((c0, c1), (wc0, wc1)) = axis_taps(out_w, in_w, oj);
                taps.push([
                    (r0 * in_w + c0, wr0 * wc0),
                    (r0 * in_w + c1, wr0 * wc1),
                    (r1 * in_w + c0, wr1 * wc0),
                    (r1 * in_w + c1, wr1 * wc1),
                ]);
            }
        }
        BilinearPlan {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        }
    }

    pub fn apply2(&self, input: &Grid2) -> Grid2 {
        debug_assert_eq!((input.h, input.w), (self.in_h, self.in_w));
        let mut out = Grid2::zeros(self.out_h, self.out_w);
        for (o, taps) in self.taps.iter().enumerate() {
            let mut acc = 0.0;
            for &(src, w) in taps {
                acc += input.data[src] * w;
            }
            out.data[o] = acc;
        }
        out
    }

    /// Transpose of `apply2`: scatters output-space gradients back to input cells.
    pub fn backward2(&self, grad_out: &Grid2) -> Grid2 {
        debug_assert_eq!((grad_out.h, grad_out.w), (self.out_h, self.out_w));
        let mut grad_in = Grid2::zeros(self.in_h, self.in_w);
        for (o, taps) in self.taps.iter().enumerate() {
            let g = grad_out.data[o];
            for &(src, w) in taps {
                grad_in.data[src] += g * w;
            }
        }
        grad_in
    }

    pub fn apply3(&self, input: &Grid3) -> Grid3 {
        debug_assert_eq!((input.h, input.w), (self.in_h, self.in_w));
        let c = input.c;
        let mut out = Grid3::zeros(self.out_h, self.out_w, c);
        for (o, taps) in self.taps.iter().enumerate() {
            let dst = &mut out.data[o * c..(o + 1) * c];
            for &(src, w) in taps {
                let s = &input.data[src * c..(src + 1) * c];
                for k in 0..c {
                    dst[k] += s[k] * w;
                }
            }
        }
        out
    }
}

/// Boundary handling for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample (.. 2 1 | 0 1 2 .. n-1 | n-2 ..).
    Reflect,
}

#[inline]
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i % period;
    if m < 0 {
        m += period;
    }
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Resolve a padded source coordinate; `None` means a zero tap.
#[inline]
fn src_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    match mode {
        PadMode::Zero => {
            if i < 0 || i >= n as isize {
                None
            } else {
                Some(i as usize)
            }
        }
        PadMode::Reflect => Some(reflect_index(i, n)),
    }
}

/// Square k x k convolution with dilation, padded to preserve spatial dims.
///
/// Weight layout: `((o * c_in + ic) * k + di) * k + dj`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub pad: PadMode,
}

impl Conv2d {
    pub fn new(c_in: usize, c_out: usize, k: usize, dilation: usize, pad: PadMode) -> Self {
        assert!(k % 2 == 1, "kernel size must be odd to preserve dims");
        Conv2d {
            c_in,
            c_out,
            k,
            dilation,
            pad,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    /// Tap list for one output cell: (kernel tap index, source cell index).
    #[inline]
    fn gather_taps(&self, i: usize, j: usize, h: usize, w: usize, taps: &mut Vec<(usize, usize)>) {
        taps.clear();
        let half = (self.k / 2) as isize * self.dilation as isize;
        for di in 0..self.k {
            let si = i as isize + (di as isize * self.dilation as isize) - half;
            let Some(si) = src_index(si, h, self.pad) else {
                continue;
            };
            for dj in 0..self.k {
                let sj = j as isize + (dj as isize * self.dilation as isize) - half;
                let Some(sj) = src_index(sj, w, self.pad) else {
                    continue;
                };
                taps.push((di * self.k + dj, si * w + sj));
            }
        }
    }

    pub fn forward(&self, input: &Grid3, weight: &[f64], bias: &[f64]) -> Grid3 {
        debug_assert_eq!(input.c, self.c_in);
        debug_assert_eq!(weight.len(), self.weight_len());
        debug_assert_eq!(bias.len(), self.c_out);
        let (h, w) = (input.h, input.w);
        let kk = self.k * self.k;
        let mut out = Grid3::zeros(h, w, self.c_out);
        let mut taps = Vec::with_capacity(kk);
        // patch transposed to [c_in][tap] so each output channel is one
        // contiguous dot product against its weight row
        let mut patch = vec![0.0; self.c_in * kk];
        for i in 0..h {
            for j in 0..w {
                self.gather_taps(i, j, h, w, &mut taps);
                patch.fill(0.0);
                for &(tap, src) in &taps {
                    let svec = &input.data[src * self.c_in..(src + 1) * self.c_in];
                    for (ic, v) in svec.iter().enumerate() {
                        patch[ic * kk + tap] = *v;
                    }
                }
                let dst = out.cell_mut(i, j);
                for (o, slot) in dst.iter_mut().enumerate() {
                    let row = &weight[o * self.c_in * kk..(o + 1) * self.c_in * kk];
                    let mut acc = bias[o];
                    for (wv, pv) in row.iter().zip(&patch) {
                        acc += wv * pv;
                    }
                    *slot = acc;
                }
            }
        }
        out
    }

    /// Gradients w.r.t. input, weight and bias. Reflect taps accumulate into
    /// their mirrored source cells, matching the forward indexing exactly.
    pub fn backward(
        &self,
        input: &Grid3,
        weight: &[f64],
        grad_out: &Grid3,
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) -> Grid3 {
        debug_assert_eq!(grad_out.c, self.c_out);
        let (h, w) = (input.h, input.w);
        let kk = self.k * self.k;
        let mut grad_in = Grid3::zeros(h, w, self.c_in);
        let mut taps = Vec::with_capacity(kk);
        let mut patch = vec![0.0; self.c_in * kk];
        let mut dpatch = vec![0.0; self.c_in * kk];
        for i in 0..h {
            for j in 0..w {
                self.gather_taps(i, j, h, w, &mut taps);
                patch.fill(0.0);
                for &(tap, src) in &taps {
                    let svec = &input.data[src * self.c_in..(src + 1) * self.c_in];
                    for (ic, v) in svec.iter().enumerate() {
                        patch[ic * kk + tap] = *v;
                    }
                }
                dpatch.fill(0.0);
                let gvec = grad_out.cell(i, j);
                for (o, &g) in gvec.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    grad_bias[o] += g;
                    let base = o * self.c_in * kk;
                    let row = &weight[base..base + self.c_in * kk];
                    let grow = &mut grad_weight[base..base + self.c_in * kk];
                    for n in 0..self.c_in * kk {
                        grow[n] += g * patch[n];
                        dpatch[n] += g * row[n];
                    }
                }
                for &(tap, src) in &taps {
                    let dvec = &mut grad_in.data[src * self.c_in..(src + 1) * self.c_in];
                    for (ic, slot) in dvec.iter_mut().enumerate() {
                        *slot += dpatch[ic * kk + tap];
                    }
                }
            }
        }
        grad_in
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus, used for bias initialisation.
pub fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// y = W x + b with row-major W (out x in).
pub fn matvec(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    debug_assert_eq!(weight.len(), bias.len() * n_in);
    for (o, acc) in out.iter_mut().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        let mut s = bias[o];
        for (wv, xv) in row.iter().zip(x) {
            s += wv * xv;
        }
        *acc = s;
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}
