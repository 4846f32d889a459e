//! Plain 2D convolution kernels shared by the tape's forward and backward
//! passes. All loops run in a fixed order so results are bit-reproducible.

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub cin: usize,
    pub hin: usize,
    pub win: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvDims {
    pub fn conv(cin: usize, hin: usize, win: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        let hnum = hin + 2 * pad;
        if hnum < kh || win + 2 * pad < kw || stride == 0 {
            return None;
        }
        let hout = (hnum - kh) / stride + 1;
        let wout = (win + 2 * pad - kw) / stride + 1;
        Some(ConvDims { cin, hin, win, cout, kh, kw, stride, pad, hout, wout })
    }

    /// Dims for the transposed variant: `hout = (hin-1)*stride - 2*pad + kh`.
    pub fn conv_transpose(cin: usize, hin: usize, win: usize, cout: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || hin == 0 || win == 0 {
            return None;
        }
        let hout = ((hin - 1) * stride + kh).checked_sub(2 * pad)?;
        let wout = ((win - 1) * stride + kw).checked_sub(2 * pad)?;
        if hout == 0 || wout == 0 {
            return None;
        }
        Some(ConvDims { cin, hin, win, cout, kh, kw, stride, pad, hout, wout })
    }
}

#[inline]
fn at(c: usize, y: usize, x: usize, h: usize, w: usize) -> usize {
    (c * h + y) * w + x
}

pub fn conv2d_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], d: &ConvDims) -> Vec<S> {
    let mut y = vec![S::ZERO; d.cout * d.hout * d.wout];
    for co in 0..d.cout {
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                let mut acc = b[co];
                for ci in 0..d.cin {
                    for i in 0..d.kh {
                        let iy = (oy * d.stride + i).wrapping_sub(d.pad);
                        if iy >= d.hin {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ix = (ox * d.stride + j).wrapping_sub(d.pad);
                            if ix >= d.win {
                                continue;
                            }
                            let wv = w[((co * d.cin + ci) * d.kh + i) * d.kw + j];
                            acc += x[at(ci, iy, ix, d.hin, d.win)] * wv;
                        }
                    }
                }
                y[at(co, oy, ox, d.hout, d.wout)] = acc;
            }
        }
    }
    y
}

pub fn conv2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    d: &ConvDims,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::ZERO; d.cin * d.hin * d.win];
    let mut gw = vec![S::ZERO; d.cout * d.cin * d.kh * d.kw];
    let mut gb = vec![S::ZERO; d.cout];
    for co in 0..d.cout {
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                let g = gout[at(co, oy, ox, d.hout, d.wout)];
                gb[co] += g;
                for ci in 0..d.cin {
                    for i in 0..d.kh {
                        let iy = (oy * d.stride + i).wrapping_sub(d.pad);
                        if iy >= d.hin {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ix = (ox * d.stride + j).wrapping_sub(d.pad);
                            if ix >= d.win {
                                continue;
                            }
                            let widx = ((co * d.cin + ci) * d.kh + i) * d.kw + j;
                            gw[widx] += g * x[at(ci, iy, ix, d.hin, d.win)];
                            gx[at(ci, iy, ix, d.hin, d.win)] += g * w[widx];
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution; weight layout is `[cin, cout, kh, kw]`.
pub fn conv_transpose2d_forward<S: Scalar>(x: &[S], w: &[S], b: &[S], d: &ConvDims) -> Vec<S> {
    let mut y = vec![S::ZERO; d.cout * d.hout * d.wout];
    for co in 0..d.cout {
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                y[at(co, oy, ox, d.hout, d.wout)] = b[co];
            }
        }
    }
    for ci in 0..d.cin {
        for iy in 0..d.hin {
            for ix in 0..d.win {
                let xv = x[at(ci, iy, ix, d.hin, d.win)];
                for co in 0..d.cout {
                    for i in 0..d.kh {
                        let oy = (iy * d.stride + i).wrapping_sub(d.pad);
                        if oy >= d.hout {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ox = (ix * d.stride + j).wrapping_sub(d.pad);
                            if ox >= d.wout {
                                continue;
                            }
                            let wv = w[((ci * d.cout + co) * d.kh + i) * d.kw + j];
                            y[at(co, oy, ox, d.hout, d.wout)] += xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

pub fn conv_transpose2d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    gout: &[S],
    d: &ConvDims,
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let mut gx = vec![S::ZERO; d.cin * d.hin * d.win];
    let mut gw = vec![S::ZERO; d.cin * d.cout * d.kh * d.kw];
    let mut gb = vec![S::ZERO; d.cout];
    for co in 0..d.cout {
        for oy in 0..d.hout {
            for ox in 0..d.wout {
                gb[co] += gout[at(co, oy, ox, d.hout, d.wout)];
            }
        }
    }
    for ci in 0..d.cin {
        for iy in 0..d.hin {
            for ix in 0..d.win {
                let xv = x[at(ci, iy, ix, d.hin, d.win)];
                let mut acc = S::ZERO;
                for co in 0..d.cout {
                    for i in 0..d.kh {
                        let oy = (iy * d.stride + i).wrapping_sub(d.pad);
                        if oy >= d.hout {
                            continue;
                        }
                        for j in 0..d.kw {
                            let ox = (ix * d.stride + j).wrapping_sub(d.pad);
                            if ox >= d.wout {
                                continue;
                            }
                            let g = gout[at(co, oy, ox, d.hout, d.wout)];
                            let widx = ((ci * d.cout + co) * d.kh + i) * d.kw + j;
                            gw[widx] += xv * g;
                            acc += w[widx] * g;
                        }
                    }
                }
                gx[at(ci, iy, ix, d.hin, d.win)] += acc;
            }
        }
    }
    (gx, gw, gb)
}
