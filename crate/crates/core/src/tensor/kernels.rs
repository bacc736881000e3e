//! Raw slice kernels shared by eager tensor code and the tape.

use crate::error::{Error, Result};

/// `out[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += dot(arow, brow);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

pub fn transpose(a: &[f64], out: &mut [f64], m: usize, n: usize) {
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shape bookkeeping for a zero-padded strided 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let &[c, h, wd] = x else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("input must be [C, H, W], got {x:?}"),
            });
        };
        let &[o, ci, kh, kw] = w else {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel must be [O, C, kh, kw], got {w:?}"),
            });
        };
        if ci != c {
            return Err(Error::shape("conv2d", x, w));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * padding, wd + 2 * padding);
        if kh > ph || kw > pw {
            return Err(Error::KernelTooLarge {
                kernel: [kh, kw],
                padded: [ph, pw],
            });
        }
        Ok(ConvGeometry {
            in_channels: c,
            in_h: h,
            in_w: wd,
            out_channels: o,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds the input into a `[C·kh·kw, out_h·out_w]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch_len() * p];
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let src = &x[(c * self.in_h + iy as usize) * self.in_w..];
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dst[oy * self.out_w + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_acc(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.positions();
        for c in 0..self.in_channels {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (c * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.in_h as isize {
                            continue;
                        }
                        let base = (c * self.in_h + iy as usize) * self.in_w;
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.in_w {
                                dx[base + ix as usize] += src[oy * self.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
        let p = self.positions();
        let cols = self.im2col(x);
        let mut out = vec![0.0; self.out_channels * p];
        if let Some(b) = bias {
            for (o, &bv) in b.iter().enumerate() {
                out[o * p..(o + 1) * p].iter_mut().for_each(|v| *v = bv);
            }
        }
        matmul_acc(w, &cols, &mut out, self.out_channels, self.patch_len(), p);
        out
    }

    /// Accumulates input, weight and bias gradients for upstream `dout`.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        dout: &[f64],
        dx: Option<&mut [f64]>,
        dw: Option<&mut [f64]>,
        db: Option<&mut [f64]>,
    ) {
        let p = self.positions();
        let k = self.patch_len();
        if let Some(dw) = dw {
            let cols = self.im2col(x);
            matmul_nt_acc(dout, &cols, dw, self.out_channels, p, k);
        }
        if let Some(db) = db {
            for (o, g) in db.iter_mut().enumerate() {
                *g += dout[o * p..(o + 1) * p].iter().sum::<f64>();
            }
        }
        if let Some(dx) = dx {
            let mut dcols = vec![0.0; k * p];
            matmul_tn_acc(w, dout, &mut dcols, self.out_channels, k, p);
            self.col2im_acc(&dcols, dx);
        }
    }
}
