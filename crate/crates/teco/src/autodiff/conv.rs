//! Direct 3-D convolution kernels.
//!
//! Loop order is fixed so accumulation into every output element happens in
//! one deterministic sequence; the innermost loop runs over the output width
//! so the compiler can vectorize without reassociating sums.

use crate::error::{Result, TecoError};

pub fn conv_out_len(input: usize, kernel: usize, pad: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub c_in: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    /// Replicate (edge) padding along time instead of zeros, so a clip that
    /// is constant in time stays constant in time after convolution.
    pub time_edge: bool,
}

impl ConvDims {
    pub fn from_shapes(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        if x_shape.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: x_shape.to_vec(),
            });
        }
        if w_shape.len() != 5 {
            return Err(TecoError::RankMismatch {
                expected: 5,
                shape: w_shape.to_vec(),
            });
        }
        if x_shape[1] != w_shape[1] {
            return Err(TecoError::DimMismatch {
                lhs: x_shape.to_vec(),
                rhs: w_shape.to_vec(),
            });
        }
        let dims = ConvDims {
            n: x_shape[0],
            c_in: x_shape[1],
            t: x_shape[2],
            h: x_shape[3],
            w: x_shape[4],
            c_out: w_shape[0],
            kt: w_shape[2],
            kh: w_shape[3],
            kw: w_shape[4],
            stride,
            pad,
            time_edge: false,
        };
        if dims.kt > dims.t + 2 * pad[0] || dims.kh > dims.h + 2 * pad[1] || dims.kw > dims.w + 2 * pad[2]
        {
            return Err(TecoError::KernelTooLarge {
                kernel: vec![dims.kt, dims.kh, dims.kw],
                input: vec![dims.t + 2 * pad[0], dims.h + 2 * pad[1], dims.w + 2 * pad[2]],
            });
        }
        Ok(dims)
    }

    pub fn with_time_edge(mut self) -> Self {
        self.time_edge = true;
        self
    }

    pub fn out_t(&self) -> usize {
        conv_out_len(self.t, self.kt, self.pad[0], self.stride[0])
    }
    pub fn out_h(&self) -> usize {
        conv_out_len(self.h, self.kh, self.pad[1], self.stride[1])
    }
    pub fn out_w(&self) -> usize {
        conv_out_len(self.w, self.kw, self.pad[2], self.stride[2])
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.out_t(), self.out_h(), self.out_w()]
    }
}

/// Range of output positions `o` with `o*stride + k - pad` inside `[0, input)`.
fn valid_out_range(input: usize, k: usize, pad: usize, stride: usize, out: usize) -> (usize, usize) {
    // smallest o with o*stride >= pad - k
    let lo = if k >= pad { 0 } else { (pad - k + stride - 1) / stride };
    // largest o with o*stride + k - pad < input
    let hi_excl = if input + pad > k {
        ((input + pad - k - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi_excl), hi_excl)
}

impl ConvDims {
    /// Output t-range for kernel offset `kt`, and a closure-free index map:
    /// zero mode restricts the range, edge mode clamps the input index.
    fn time_range(&self, kt: usize, ot: usize) -> (usize, usize) {
        if self.time_edge {
            (0, ot)
        } else {
            valid_out_range(self.t, kt, self.pad[0], self.stride[0], ot)
        }
    }

    fn time_index(&self, to: usize, kt: usize) -> usize {
        let ti = (to * self.stride[0] + kt) as isize - self.pad[0] as isize;
        if self.time_edge {
            ti.clamp(0, self.t as isize - 1) as usize
        } else {
            ti as usize
        }
    }
}

pub fn conv3d_forward(x: &[f32], w: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    let (ot, oh, ow) = (d.out_t(), d.out_h(), d.out_w());
    let mut y = vec![0.0f32; d.n * d.c_out * ot * oh * ow];
    let x_c_stride = d.t * d.h * d.w;
    let y_c_stride = ot * oh * ow;
    for n in 0..d.n {
        for co in 0..d.c_out {
            let y_base = (n * d.c_out + co) * y_c_stride;
            if let Some(b) = bias {
                y[y_base..y_base + y_c_stride].fill(b[co]);
            }
            for ci in 0..d.c_in {
                let x_base = (n * d.c_in + ci) * x_c_stride;
                for kt in 0..d.kt {
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let wv = w[(((co * d.c_in + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw];
                            if wv == 0.0 {
                                continue;
                            }
                            let (tlo, thi) = d.time_range(kt, ot);
                            let (hlo, hhi) = valid_out_range(d.h, kh, d.pad[1], d.stride[1], oh);
                            let (wlo, whi) = valid_out_range(d.w, kw, d.pad[2], d.stride[2], ow);
                            for to in tlo..thi {
                                let ti = d.time_index(to, kt);
                                for ho in hlo..hhi {
                                    let hi = ho * d.stride[1] + kh - d.pad[1];
                                    let x_row = x_base + (ti * d.h + hi) * d.w;
                                    let y_row = y_base + (to * oh + ho) * ow;
                                    let sw = d.stride[2];
                                    let off = kw as isize - d.pad[2] as isize;
                                    for wo in wlo..whi {
                                        let wi = (wo * sw) as isize + off;
                                        y[y_row + wo] += wv * x[x_row + wi as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoints for input, weight and bias. Each output buffer is written in a
/// fixed order independent of thread count (this implementation is serial).
pub fn conv3d_backward(
    x: &[f32],
    w: &[f32],
    dy: &[f32],
    d: &ConvDims,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Option<Vec<f32>>) {
    let (ot, oh, ow) = (d.out_t(), d.out_h(), d.out_w());
    let x_c_stride = d.t * d.h * d.w;
    let y_c_stride = ot * oh * ow;

    let mut dx = if need_dx { Some(vec![0.0f32; x.len()]) } else { None };
    let mut dw = if need_dw { Some(vec![0.0f32; w.len()]) } else { None };
    let mut db = if need_db { Some(vec![0.0f32; d.c_out]) } else { None };

    if let Some(db) = db.as_mut() {
        for n in 0..d.n {
            for co in 0..d.c_out {
                let y_base = (n * d.c_out + co) * y_c_stride;
                let mut s = 0.0f32;
                for v in &dy[y_base..y_base + y_c_stride] {
                    s += v;
                }
                db[co] += s;
            }
        }
    }

    for n in 0..d.n {
        for co in 0..d.c_out {
            let y_base = (n * d.c_out + co) * y_c_stride;
            for ci in 0..d.c_in {
                let x_base = (n * d.c_in + ci) * x_c_stride;
                for kt in 0..d.kt {
                    for kh in 0..d.kh {
                        for kw in 0..d.kw {
                            let widx = (((co * d.c_in + ci) * d.kt + kt) * d.kh + kh) * d.kw + kw;
                            let wv = w[widx];
                            let (tlo, thi) = d.time_range(kt, ot);
                            let (hlo, hhi) = valid_out_range(d.h, kh, d.pad[1], d.stride[1], oh);
                            let (wlo, whi) = valid_out_range(d.w, kw, d.pad[2], d.stride[2], ow);
                            let mut wacc = 0.0f32;
                            for to in tlo..thi {
                                let ti = d.time_index(to, kt);
                                for ho in hlo..hhi {
                                    let hi = ho * d.stride[1] + kh - d.pad[1];
                                    let x_row = x_base + (ti * d.h + hi) * d.w;
                                    let y_row = y_base + (to * oh + ho) * ow;
                                    let sw = d.stride[2];
                                    let off = kw as isize - d.pad[2] as isize;
                                    if let Some(dx) = dx.as_mut() {
                                        for wo in wlo..whi {
                                            let wi = ((wo * sw) as isize + off) as usize;
                                            dx[x_row + wi] += wv * dy[y_row + wo];
                                        }
                                    }
                                    if dw.is_some() {
                                        for wo in wlo..whi {
                                            let wi = ((wo * sw) as isize + off) as usize;
                                            wacc += x[x_row + wi] * dy[y_row + wo];
                                        }
                                    }
                                }
                            }
                            if let Some(dw) = dw.as_mut() {
                                dw[widx] += wacc;
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw, db)
}
