//! Direct convolution kernels. The 3x3 stride-1 pad-1 case that dominates
//! the encoder runs through fused row kernels (one contiguous pass per tap
//! row); everything else takes the generic path.

use crate::Real;

/// Copy an `h x w` plane into the interior of an `(h+2) x (w+2)` zero-padded
/// scratch buffer.
#[inline]
fn pad_plane(dst: &mut [Real], src: &[Real], h: usize, w: usize) {
    dst.fill(0.0);
    let pw = w + 2;
    for y in 0..h {
        dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
    }
}

/// One fused output row of a 3x3 convolution against three padded rows:
/// out[x] += sum_{t} k[t] * p_t[x + dx_t], branch-free over the full width.
#[inline]
fn fused_row_3x3(out: &mut [Real], p0: &[Real], p1: &[Real], p2: &[Real], k: &[Real]) {
    let w = out.len();
    for x in 0..w {
        out[x] += k[0] * p0[x]
            + k[1] * p0[x + 1]
            + k[2] * p0[x + 2]
            + k[3] * p1[x]
            + k[4] * p1[x + 1]
            + k[5] * p1[x + 2]
            + k[6] * p2[x]
            + k[7] * p2[x + 1]
            + k[8] * p2[x + 2];
    }
}

/// Nine dot products of one gradient row against three padded input rows,
/// for the weight gradient of the 3x3 case.
#[inline]
fn fused_row_dots(acc: &mut [Real; 9], g: &[Real], p0: &[Real], p1: &[Real], p2: &[Real]) {
    let w = g.len();
    let mut a = [0.0 as Real; 9];
    for x in 0..w {
        let gv = g[x];
        a[0] += gv * p0[x];
        a[1] += gv * p0[x + 1];
        a[2] += gv * p0[x + 2];
        a[3] += gv * p1[x];
        a[4] += gv * p1[x + 1];
        a[5] += gv * p1[x + 2];
        a[6] += gv * p2[x];
        a[7] += gv * p2[x + 1];
        a[8] += gv * p2[x + 2];
    }
    for t in 0..9 {
        acc[t] += a[t];
    }
}

fn is_fast_3x3(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 3 && kw == 3 && stride == 1 && pad == 1
}

fn is_fast_3x3_s2(kh: usize, kw: usize, stride: usize, pad: usize) -> bool {
    kh == 3 && kw == 3 && stride == 2 && pad == 1
}

/// Strided variant of [`fused_row_3x3`]: out[ox] reads padded columns 2*ox+dx.
#[inline]
fn fused_row_3x3_s2(out: &mut [Real], p0: &[Real], p1: &[Real], p2: &[Real], k: &[Real]) {
    for (ox, o) in out.iter_mut().enumerate() {
        let b = 2 * ox;
        *o += k[0] * p0[b]
            + k[1] * p0[b + 1]
            + k[2] * p0[b + 2]
            + k[3] * p1[b]
            + k[4] * p1[b + 1]
            + k[5] * p1[b + 2]
            + k[6] * p2[b]
            + k[7] * p2[b + 1]
            + k[8] * p2[b + 2];
    }
}

/// out[n,co,oh,ow] = bias[co] + sum_{ci,kh,kw} in[n,ci,oh*s-p+kh,ow*s-p+kw] * w[co,ci,kh,kw]
pub fn forward(
    input: &[Real],
    weight: &[Real],
    bias: &[Real],
    (n, c_in, h, w): (usize, usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<Real> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c_out * oh * ow];
    if is_fast_3x3(kh, kw, stride, pad) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut padded = vec![0.0 as Real; c_in * plane];
        for ni in 0..n {
            for ci in 0..c_in {
                pad_plane(
                    &mut padded[ci * plane..(ci + 1) * plane],
                    &input[(ni * c_in + ci) * h * w..(ni * c_in + ci + 1) * h * w],
                    h,
                    w,
                );
            }
            for co in 0..c_out {
                let ob = (ni * c_out + co) * h * w;
                out[ob..ob + h * w].fill(bias[co]);
                for ci in 0..c_in {
                    let p = &padded[ci * plane..(ci + 1) * plane];
                    let k = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                    for oy in 0..h {
                        fused_row_3x3(
                            &mut out[ob + oy * w..ob + (oy + 1) * w],
                            &p[oy * pw..],
                            &p[(oy + 1) * pw..],
                            &p[(oy + 2) * pw..],
                            k,
                        );
                    }
                }
            }
        }
        return out;
    }
    if is_fast_3x3_s2(kh, kw, stride, pad) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut padded = vec![0.0 as Real; c_in * plane];
        for ni in 0..n {
            for ci in 0..c_in {
                pad_plane(
                    &mut padded[ci * plane..(ci + 1) * plane],
                    &input[(ni * c_in + ci) * h * w..(ni * c_in + ci + 1) * h * w],
                    h,
                    w,
                );
            }
            for co in 0..c_out {
                let ob = (ni * c_out + co) * oh * ow;
                out[ob..ob + oh * ow].fill(bias[co]);
                for ci in 0..c_in {
                    let p = &padded[ci * plane..(ci + 1) * plane];
                    let k = &weight[(co * c_in + ci) * 9..(co * c_in + ci) * 9 + 9];
                    for oy in 0..oh {
                        fused_row_3x3_s2(
                            &mut out[ob + oy * ow..ob + (oy + 1) * ow],
                            &p[2 * oy * pw..],
                            &p[(2 * oy + 1) * pw..],
                            &p[(2 * oy + 2) * pw..],
                            k,
                        );
                    }
                }
            }
        }
        return out;
    }
    for ni in 0..n {
        for co in 0..c_out {
            let ob = (ni * c_out + co) * oh * ow;
            out[ob..ob + oh * ow].fill(bias[co]);
            for ci in 0..c_in {
                let ib = (ni * c_in + ci) * h * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((co * c_in + ci) * kh + khi) * kw + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + khi) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let orow = ob + oy * ow;
                            let irow = ib + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kwi) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                out[orow + ox] += wv * input[irow + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// d_input for the convolution above, given the output gradient. For the
/// fast case this is a correlation with the 180-degree flipped kernel.
pub fn backward_input(
    g: &[Real],
    weight: &[Real],
    (n, c_in, h, w): (usize, usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<Real> {
    let mut din = vec![0.0; n * c_in * h * w];
    if is_fast_3x3(kh, kw, stride, pad) {
        // d_input is the correlation of the output gradient with the
        // 180-degree flipped kernel
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut padded = vec![0.0 as Real; c_out * plane];
        for ni in 0..n {
            for co in 0..c_out {
                pad_plane(
                    &mut padded[co * plane..(co + 1) * plane],
                    &g[(ni * c_out + co) * h * w..(ni * c_out + co + 1) * h * w],
                    h,
                    w,
                );
            }
            for ci in 0..c_in {
                let db = (ni * c_in + ci) * h * w;
                for co in 0..c_out {
                    let p = &padded[co * plane..(co + 1) * plane];
                    let wb = (co * c_in + ci) * 9;
                    let mut k = [0.0 as Real; 9];
                    for t in 0..9 {
                        k[t] = weight[wb + 8 - t];
                    }
                    for iy in 0..h {
                        fused_row_3x3(
                            &mut din[db + iy * w..db + (iy + 1) * w],
                            &p[iy * pw..],
                            &p[(iy + 1) * pw..],
                            &p[(iy + 2) * pw..],
                            &k,
                        );
                    }
                }
            }
        }
        return din;
    }
    if is_fast_3x3_s2(kh, kw, stride, pad) {
        // scatter into a padded scratch plane, then peel off the border
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut scratch = vec![0.0 as Real; c_in * plane];
        for ni in 0..n {
            scratch.fill(0.0);
            for ci in 0..c_in {
                let dpl = &mut scratch[ci * plane..(ci + 1) * plane];
                for co in 0..c_out {
                    let gb = (ni * c_out + co) * oh * ow;
                    let wb = (co * c_in + ci) * 9;
                    let k = &weight[wb..wb + 9];
                    for oy in 0..oh {
                        let r0 = 2 * oy * pw;
                        let r1 = r0 + pw;
                        let r2 = r1 + pw;
                        for ox in 0..ow {
                            let gv = g[gb + oy * ow + ox];
                            let b = 2 * ox;
                            dpl[r0 + b] += gv * k[0];
                            dpl[r0 + b + 1] += gv * k[1];
                            dpl[r0 + b + 2] += gv * k[2];
                            dpl[r1 + b] += gv * k[3];
                            dpl[r1 + b + 1] += gv * k[4];
                            dpl[r1 + b + 2] += gv * k[5];
                            dpl[r2 + b] += gv * k[6];
                            dpl[r2 + b + 1] += gv * k[7];
                            dpl[r2 + b + 2] += gv * k[8];
                        }
                    }
                }
                let db = (ni * c_in + ci) * h * w;
                for y in 0..h {
                    let src = &dpl[(y + 1) * pw + 1..(y + 1) * pw + 1 + w];
                    let dst = &mut din[db + y * w..db + (y + 1) * w];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        return din;
    }
    for ni in 0..n {
        for co in 0..c_out {
            let ob = (ni * c_out + co) * oh * ow;
            for ci in 0..c_in {
                let ib = (ni * c_in + ci) * h * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = weight[((co * c_in + ci) * kh + khi) * kw + kwi];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * stride + khi) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let orow = ob + oy * ow;
                            let irow = ib + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kwi) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                din[irow + ix as usize] += wv * g[orow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    din
}

/// d_weight for the convolution above, given the output gradient.
pub fn backward_weight(
    g: &[Real],
    input: &[Real],
    (n, c_in, h, w): (usize, usize, usize, usize),
    (c_out, kh, kw): (usize, usize, usize),
    (oh, ow): (usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<Real> {
    let mut dw = vec![0.0; c_out * c_in * kh * kw];
    if is_fast_3x3(kh, kw, stride, pad) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut padded = vec![0.0 as Real; c_in * plane];
        for ni in 0..n {
            for ci in 0..c_in {
                pad_plane(
                    &mut padded[ci * plane..(ci + 1) * plane],
                    &input[(ni * c_in + ci) * h * w..(ni * c_in + ci + 1) * h * w],
                    h,
                    w,
                );
            }
            for co in 0..c_out {
                let gb = (ni * c_out + co) * h * w;
                for ci in 0..c_in {
                    let p = &padded[ci * plane..(ci + 1) * plane];
                    let mut acc = [0.0 as Real; 9];
                    for oy in 0..h {
                        fused_row_dots(
                            &mut acc,
                            &g[gb + oy * w..gb + (oy + 1) * w],
                            &p[oy * pw..],
                            &p[(oy + 1) * pw..],
                            &p[(oy + 2) * pw..],
                        );
                    }
                    let wb = (co * c_in + ci) * 9;
                    for t in 0..9 {
                        dw[wb + t] += acc[t];
                    }
                }
            }
        }
        return dw;
    }
    if is_fast_3x3_s2(kh, kw, stride, pad) {
        let pw = w + 2;
        let plane = (h + 2) * pw;
        let mut padded = vec![0.0 as Real; c_in * plane];
        for ni in 0..n {
            for ci in 0..c_in {
                pad_plane(
                    &mut padded[ci * plane..(ci + 1) * plane],
                    &input[(ni * c_in + ci) * h * w..(ni * c_in + ci + 1) * h * w],
                    h,
                    w,
                );
            }
            for co in 0..c_out {
                let gb = (ni * c_out + co) * oh * ow;
                for ci in 0..c_in {
                    let p = &padded[ci * plane..(ci + 1) * plane];
                    let mut acc = [0.0 as Real; 9];
                    for oy in 0..oh {
                        let p0 = &p[2 * oy * pw..];
                        let p1 = &p[(2 * oy + 1) * pw..];
                        let p2 = &p[(2 * oy + 2) * pw..];
                        for ox in 0..ow {
                            let gv = g[gb + oy * ow + ox];
                            let b = 2 * ox;
                            acc[0] += gv * p0[b];
                            acc[1] += gv * p0[b + 1];
                            acc[2] += gv * p0[b + 2];
                            acc[3] += gv * p1[b];
                            acc[4] += gv * p1[b + 1];
                            acc[5] += gv * p1[b + 2];
                            acc[6] += gv * p2[b];
                            acc[7] += gv * p2[b + 1];
                            acc[8] += gv * p2[b + 2];
                        }
                    }
                    let wb = (co * c_in + ci) * 9;
                    for t in 0..9 {
                        dw[wb + t] += acc[t];
                    }
                }
            }
        }
        return dw;
    }
    for ni in 0..n {
        for co in 0..c_out {
            let ob = (ni * c_out + co) * oh * ow;
            for ci in 0..c_in {
                let ib = (ni * c_in + ci) * h * w;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let mut acc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + khi) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let orow = ob + oy * ow;
                            let irow = ib + iy as usize * w;
                            for ox in 0..ow {
                                let ix = (ox * stride + kwi) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += g[orow + ox] * input[irow + ix as usize];
                            }
                        }
                        dw[((co * c_in + ci) * kh + khi) * kw + kwi] += acc;
                    }
                }
            }
        }
    }
    dw
}
