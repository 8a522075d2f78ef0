//! im2col convolution kernels used by the tape.

use crate::gemm::gemm;
use crate::{Result, TensorError};

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Geometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize) -> Result<Self> {
        let bad = || TensorError::Dimension(format!("conv2d input {input:?} weight {weight:?} stride {stride}"));
        if input.len() != 4 || weight.len() != 4 || stride == 0 {
            return Err(bad());
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, k) = (weight[0], weight[2]);
        if weight[1] != c_in || weight[3] != k || k > h || k > w {
            return Err(bad());
        }
        Ok(Self { n, c_in, h, w, c_out, k, stride, ho: (h - k) / stride + 1, wo: (w - k) / stride + 1 })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.ho, self.wo]
    }

    fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Column matrix `[c_in*k*k, ho*wo]` for one sample.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oi in 0..self.ho {
                        let src = (c * self.h + oi * self.stride + ki) * self.w + kj;
                        for oj in 0..self.wo {
                            cols[row * p + oi * self.wo + oj] = x[src + oj * self.stride];
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    for oi in 0..self.ho {
                        let dst = (c * self.h + oi * self.stride + ki) * self.w + kj;
                        for oj in 0..self.wo {
                            dx[dst + oj * self.stride] += cols[row * p + oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(g: &Geometry, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (p, patch) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut out = vec![0.0; g.n * out_sz];
    let mut cols = vec![0.0; patch * p];
    for s in 0..g.n {
        g.im2col(&x[s * in_sz..(s + 1) * in_sz], &mut cols);
        let o = &mut out[s * out_sz..(s + 1) * out_sz];
        for (co, chunk) in o.chunks_mut(p).enumerate() {
            chunk.fill(b[co]);
        }
        gemm(g.c_out, patch, p, w, false, &cols, false, o, 1.0);
    }
    out
}

pub(crate) fn backward_bias(g: &Geometry, dy: &[f64], db: &mut [f64]) {
    let p = g.positions();
    for chunk in dy.chunks(g.c_out * p) {
        for (co, plane) in chunk.chunks(p).enumerate() {
            db[co] += plane.iter().sum::<f64>();
        }
    }
}

pub(crate) fn backward_weight(g: &Geometry, dy: &[f64], x: &[f64], dw: &mut [f64]) {
    let (p, patch) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut cols = vec![0.0; patch * p];
    for s in 0..g.n {
        g.im2col(&x[s * in_sz..(s + 1) * in_sz], &mut cols);
        // dW[c_out, patch] += dY[c_out, p] * cols^T
        gemm(g.c_out, p, patch, &dy[s * out_sz..(s + 1) * out_sz], false, &cols, true, dw, 1.0);
    }
}

pub(crate) fn backward_input(g: &Geometry, dy: &[f64], w: &[f64], dx: &mut [f64]) {
    let (p, patch) = (g.positions(), g.patch());
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * p;
    let mut dcols = vec![0.0; patch * p];
    for s in 0..g.n {
        // dcols[patch, p] = W^T * dY
        gemm(patch, g.c_out, p, w, true, &dy[s * out_sz..(s + 1) * out_sz], false, &mut dcols, 0.0);
        g.col2im(&dcols, &mut dx[s * in_sz..(s + 1) * in_sz]);
    }
}
