//! Direct-loop 2D convolution kernels for the tape.

use super::{Tape, TensorId};
use crate::error::{Error, Result};

fn conv_shapes(tape: &Tape, op: &'static str, input: TensorId, weight: TensorId) -> Result<(usize, usize, usize, usize, usize, usize, usize, usize)> {
    let di = tape.nodes[input].dims.clone();
    let dw = tape.nodes[weight].dims.clone();
    if di.len() != 4 || dw.len() != 4 {
        return Err(Error::ShapeMismatch { op, lhs: di, rhs: dw });
    }
    Ok((di[0], di[1], di[2], di[3], dw[0], dw[1], dw[2], dw[3]))
}

pub(super) fn conv2d_forward(
    tape: &Tape,
    input: TensorId,
    weight: TensorId,
    (sh, sw): (usize, usize),
    pad: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, cin, h, w, cout, wcin, kh, kw) = conv_shapes(tape, "conv2d", input, weight)?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: tape.nodes[input].dims.clone(),
            rhs: tape.nodes[weight].dims.clone(),
        });
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} larger than padded input {h}x{w} pad {pad}")));
    }
    let oh = (h + 2 * pad - kh) / sh + 1;
    let ow = (w + 2 * pad - kw) / sw + 1;
    let iv = &tape.nodes[input].data;
    let wv = &tape.nodes[weight].data;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for ni in 0..n {
        for co in 0..cout {
            let obase = (ni * cout + co) * oh * ow;
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                let wbase = (co * cin + ci) * kh * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wt = wv[wbase + khi * kw + kwi];
                        if wt == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * sh + khi) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = ibase + iy as usize * w;
                            let orow = obase + oy * ow;
                            for ox in 0..ow {
                                let ix = (ox * sw + kwi) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[orow + ox] += wt * iv[irow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((vec![n, cout, oh, ow], out))
}

pub(super) fn conv2d_backward(
    tape: &Tape,
    input: TensorId,
    weight: TensorId,
    (sh, sw): (usize, usize),
    pad: usize,
    out_dims: &[usize],
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let di = &tape.nodes[input].dims;
    let dw = &tape.nodes[weight].dims;
    let (n, cin, h, w) = (di[0], di[1], di[2], di[3]);
    let (cout, kh, kw) = (dw[0], dw[2], dw[3]);
    let (oh, ow) = (out_dims[2], out_dims[3]);
    let iv = &tape.nodes[input].data;
    let wv = &tape.nodes[weight].data;
    tape.accum(grads, input, |buf| {
        for ni in 0..n {
            for co in 0..cout {
                let obase = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    let ibase = (ni * cin + ci) * h * w;
                    let wbase = (co * cin + ci) * kh * kw;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let wt = wv[wbase + khi * kw + kwi];
                            if wt == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * sh + khi) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = ibase + iy as usize * w;
                                let orow = obase + oy * ow;
                                for ox in 0..ow {
                                    let ix = (ox * sw + kwi) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    buf[irow + ix as usize] += wt * g[orow + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    tape.accum(grads, weight, |buf| {
        for ni in 0..n {
            for co in 0..cout {
                let obase = (ni * cout + co) * oh * ow;
                for ci in 0..cin {
                    let ibase = (ni * cin + ci) * h * w;
                    let wbase = (co * cin + ci) * kh * kw;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let mut acc = 0.0f32;
                            for oy in 0..oh {
                                let iy = (oy * sh + khi) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let irow = ibase + iy as usize * w;
                                let orow = obase + oy * ow;
                                for ox in 0..ow {
                                    let ix = (ox * sw + kwi) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += iv[irow + ix as usize] * g[orow + ox];
                                }
                            }
                            buf[wbase + khi * kw + kwi] += acc;
                        }
                    }
                }
            }
        }
    });
}

pub(super) fn conv2d_transpose_forward(
    tape: &Tape,
    input: TensorId,
    weight: TensorId,
    (sh, sw): (usize, usize),
    pad: usize,
) -> Result<(Vec<usize>, Vec<f32>)> {
    let (n, cin, h, w, wcin, cout, kh, kw) = conv_shapes(tape, "conv2d_transpose", input, weight)?;
    if wcin != cin {
        return Err(Error::ShapeMismatch {
            op: "conv2d_transpose",
            lhs: tape.nodes[input].dims.clone(),
            rhs: tape.nodes[weight].dims.clone(),
        });
    }
    let oh_full = (h - 1) * sh + kh;
    let ow_full = (w - 1) * sw + kw;
    if oh_full < 2 * pad + 1 || ow_full < 2 * pad + 1 {
        return Err(Error::invalid("conv2d_transpose", format!("padding {pad} too large for output {oh_full}x{ow_full}")));
    }
    let oh = oh_full - 2 * pad;
    let ow = ow_full - 2 * pad;
    let iv = &tape.nodes[input].data;
    let wv = &tape.nodes[weight].data;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    for ni in 0..n {
        for ci in 0..cin {
            let ibase = (ni * cin + ci) * h * w;
            for co in 0..cout {
                let obase = (ni * cout + co) * oh * ow;
                let wbase = (ci * cout + co) * kh * kw;
                for iy in 0..h {
                    for ix in 0..w {
                        let x = iv[ibase + iy * w + ix];
                        if x == 0.0 {
                            continue;
                        }
                        for khi in 0..kh {
                            let oy = (iy * sh + khi) as isize - pad as isize;
                            if oy < 0 || oy >= oh as isize {
                                continue;
                            }
                            let orow = obase + oy as usize * ow;
                            for kwi in 0..kw {
                                let ox = (ix * sw + kwi) as isize - pad as isize;
                                if ox < 0 || ox >= ow as isize {
                                    continue;
                                }
                                out[orow + ox as usize] += x * wv[wbase + khi * kw + kwi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((vec![n, cout, oh, ow], out))
}

pub(super) fn conv2d_transpose_backward(
    tape: &Tape,
    input: TensorId,
    weight: TensorId,
    (sh, sw): (usize, usize),
    pad: usize,
    g: &[f32],
    grads: &mut [Option<Vec<f32>>],
) {
    let di = &tape.nodes[input].dims;
    let dw = &tape.nodes[weight].dims;
    let (n, cin, h, w) = (di[0], di[1], di[2], di[3]);
    let (cout, kh, kw) = (dw[1], dw[2], dw[3]);
    let oh = (h - 1) * sh + kh - 2 * pad;
    let ow = (w - 1) * sw + kw - 2 * pad;
    let iv = &tape.nodes[input].data;
    let wv = &tape.nodes[weight].data;
    tape.accum(grads, input, |buf| {
        for ni in 0..n {
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                for co in 0..cout {
                    let obase = (ni * cout + co) * oh * ow;
                    let wbase = (ci * cout + co) * kh * kw;
                    for iy in 0..h {
                        for ix in 0..w {
                            let mut acc = 0.0f32;
                            for khi in 0..kh {
                                let oy = (iy * sh + khi) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let orow = obase + oy as usize * ow;
                                for kwi in 0..kw {
                                    let ox = (ix * sw + kwi) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    acc += g[orow + ox as usize] * wv[wbase + khi * kw + kwi];
                                }
                            }
                            buf[ibase + iy * w + ix] += acc;
                        }
                    }
                }
            }
        }
    });
    tape.accum(grads, weight, |buf| {
        for ni in 0..n {
            for ci in 0..cin {
                let ibase = (ni * cin + ci) * h * w;
                for co in 0..cout {
                    let obase = (ni * cout + co) * oh * ow;
                    let wbase = (ci * cout + co) * kh * kw;
                    for khi in 0..kh {
                        for kwi in 0..kw {
                            let mut acc = 0.0f32;
                            for iy in 0..h {
                                let oy = (iy * sh + khi) as isize - pad as isize;
                                if oy < 0 || oy >= oh as isize {
                                    continue;
                                }
                                let orow = obase + oy as usize * ow;
                                for ix in 0..w {
                                    let ox = (ix * sw + kwi) as isize - pad as isize;
                                    if ox < 0 || ox >= ow as isize {
                                        continue;
                                    }
                                    acc += iv[ibase + iy * w + ix] * g[orow + ox as usize];
                                }
                            }
                            buf[wbase + khi * kw + kwi] += acc;
                        }
                    }
                }
            }
        }
    });
}
