//! Direct convolution kernels over row-major `[N, C, H, W]` buffers.
//!
//! Work is split across batch items with rayon. Per-item partial kernel
//! gradients are summed in item order, so results do not depend on the thread
//! count.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        c: usize,
        h: usize,
        w: usize,
        f: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return None;
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Some(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    fn in_item(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_item(&self) -> usize {
        self.f * self.oh * self.ow
    }

    /// Input coordinate for output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < size).then_some(pos as usize)
    }
}

/// Accumulates `w * plane_in` into `plane_out` for one kernel tap.
#[inline]
fn tap_forward(g: &ConvGeom, plane_in: &[f64], plane_out: &mut [f64], ky: usize, kx: usize, w: f64) {
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let row_in = &plane_in[iy * g.w..(iy + 1) * g.w];
        let row_out = &mut plane_out[oy * g.ow..(oy + 1) * g.ow];
        for (ox, out) in row_out.iter_mut().enumerate() {
            if let Some(ix) = g.src(ox, kx, g.w) {
                *out += w * row_in[ix];
            }
        }
    }
}

#[inline]
fn tap_grad_input(g: &ConvGeom, plane_gout: &[f64], plane_gin: &mut [f64], ky: usize, kx: usize, w: f64) {
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let row_g = &plane_gout[oy * g.ow..(oy + 1) * g.ow];
        let row_in = &mut plane_gin[iy * g.w..(iy + 1) * g.w];
        for (ox, &go) in row_g.iter().enumerate() {
            if let Some(ix) = g.src(ox, kx, g.w) {
                row_in[ix] += w * go;
            }
        }
    }
}

#[inline]
fn tap_grad_kernel(g: &ConvGeom, plane_gout: &[f64], plane_in: &[f64], ky: usize, kx: usize) -> f64 {
    let mut acc = 0.0;
    for oy in 0..g.oh {
        let Some(iy) = g.src(oy, ky, g.h) else { continue };
        let row_g = &plane_gout[oy * g.ow..(oy + 1) * g.ow];
        let row_in = &plane_in[iy * g.w..(iy + 1) * g.w];
        for (ox, &go) in row_g.iter().enumerate() {
            if let Some(ix) = g.src(ox, kx, g.w) {
                acc += go * row_in[ix];
            }
        }
    }
    acc
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.out_item()];
    out.par_chunks_mut(g.out_item())
        .zip(input.par_chunks(g.in_item()))
        .for_each(|(item_out, item_in)| {
            for f in 0..g.f {
                let po = &mut item_out[f * plane_out..(f + 1) * plane_out];
                for c in 0..g.c {
                    let pi = &item_in[c * plane_in..(c + 1) * plane_in];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let w = kernel[((f * g.c + c) * g.kh + ky) * g.kw + kx];
                            tap_forward(g, pi, po, ky, kx, w);
                        }
                    }
                }
            }
        });
    out
}

/// Returns `(grad_input, grad_kernel)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let klen = g.f * g.c * g.kh * g.kw;
    let mut grad_in = vec![0.0; input.len()];
    let partials: Vec<Vec<f64>> = grad_in
        .par_chunks_mut(g.in_item())
        .zip(grad_out.par_chunks(g.out_item()))
        .zip(input.par_chunks(g.in_item()))
        .map(|((item_gin, item_gout), item_in)| {
            let mut gk = vec![0.0; klen];
            for f in 0..g.f {
                let pg = &item_gout[f * plane_out..(f + 1) * plane_out];
                for c in 0..g.c {
                    let pi = &item_in[c * plane_in..(c + 1) * plane_in];
                    let pgi = &mut item_gin[c * plane_in..(c + 1) * plane_in];
                    for ky in 0..g.kh {
                        for kx in 0..g.kw {
                            let ki = ((f * g.c + c) * g.kh + ky) * g.kw + kx;
                            tap_grad_input(g, pg, pgi, ky, kx, kernel[ki]);
                            gk[ki] += tap_grad_kernel(g, pg, pi, ky, kx);
                        }
                    }
                }
            }
            gk
        })
        .collect();
    (grad_in, sum_in_order(partials, klen))
}

/// Per-channel convolution; `g.f == g.c` and the kernel is `[C, 1, kh, kw]`.
pub(crate) fn depthwise_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.out_item()];
    out.par_chunks_mut(g.out_item())
        .zip(input.par_chunks(g.in_item()))
        .for_each(|(item_out, item_in)| {
            for c in 0..g.c {
                let po = &mut item_out[c * plane_out..(c + 1) * plane_out];
                let pi = &item_in[c * plane_in..(c + 1) * plane_in];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        tap_forward(g, pi, po, ky, kx, kernel[(c * g.kh + ky) * g.kw + kx]);
                    }
                }
            }
        });
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    grad_out: &[f64],
    input: &[f64],
    kernel: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.oh * g.ow;
    let klen = g.c * g.kh * g.kw;
    let mut grad_in = vec![0.0; input.len()];
    let partials: Vec<Vec<f64>> = grad_in
        .par_chunks_mut(g.in_item())
        .zip(grad_out.par_chunks(g.out_item()))
        .zip(input.par_chunks(g.in_item()))
        .map(|((item_gin, item_gout), item_in)| {
            let mut gk = vec![0.0; klen];
            for c in 0..g.c {
                let pg = &item_gout[c * plane_out..(c + 1) * plane_out];
                let pi = &item_in[c * plane_in..(c + 1) * plane_in];
                let pgi = &mut item_gin[c * plane_in..(c + 1) * plane_in];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let ki = (c * g.kh + ky) * g.kw + kx;
                        tap_grad_input(g, pg, pgi, ky, kx, kernel[ki]);
                        gk[ki] += tap_grad_kernel(g, pg, pi, ky, kx);
                    }
                }
            }
            gk
        })
        .collect();
    (grad_in, sum_in_order(partials, klen))
}

fn sum_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut total = vec![0.0; len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}
