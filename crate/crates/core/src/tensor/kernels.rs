//! Dense forward/backward kernels: affine maps, 2D convolution with an
//! equirectangular wrap option, 2x2 max pooling and bilinear resizing.
//!
//! Convolution padding: height is always zero-padded; width either
//! zero-pads or wraps (`wrap_w`), matching the periodic longitude seam of an
//! equirectangular image.

use super::{arg_err, shape_err, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub pad: usize,
    pub wrap_w: bool,
    /// Channel groups; `groups == in_channels` gives a depthwise convolution.
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: 1, pad: 0, wrap_w: false, groups: 1 }
    }
}

impl Conv2dOpts {
    /// 3x3 same-size convolution with the width seam wrapped.
    pub fn same_wrapped() -> Self {
        Conv2dOpts { stride: 1, pad: 1, wrap_w: true, groups: 1 }
    }

    pub fn pointwise() -> Self {
        Conv2dOpts { stride: 1, pad: 0, wrap_w: false, groups: 1 }
    }
}

#[inline]
fn wrap_i(mut v: isize, n: isize) -> isize {
    while v < 0 {
        v += n;
    }
    while v >= n {
        v -= n;
    }
    v
}

pub(super) fn linear_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
) -> Result<(Vec<S>, Vec<usize>), TensorError> {
    if x.shape.is_empty() || w.shape.len() != 2 {
        return Err(shape_err("linear", format!("x {:?}, w {:?}", x.shape, w.shape)));
    }
    let in_dim = *x.shape.last().unwrap();
    let (out_dim, w_in) = (w.shape[0], w.shape[1]);
    if w_in != in_dim || b.shape != [out_dim] {
        return Err(shape_err(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
        ));
    }
    let rows = x.data.len() / in_dim;
    let mut out = vec![S::zero(); rows * out_dim];
    for r in 0..rows {
        let xr = &x.data[r * in_dim..(r + 1) * in_dim];
        let or = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, ov) in or.iter_mut().enumerate() {
            let wr = &w.data[o * in_dim..(o + 1) * in_dim];
            let mut acc = b.data[o];
            for i in 0..in_dim {
                acc = acc + xr[i] * wr[i];
            }
            *ov = acc;
        }
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = out_dim;
    Ok((out, shape))
}

#[allow(clippy::type_complexity)]
pub(super) fn linear_backward<S: Scalar>(
    g: &[S],
    x: &Tensor<S>,
    w: &Tensor<S>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let in_dim = *x.shape.last().unwrap();
    let out_dim = w.shape[0];
    let rows = x.data.len() / in_dim;
    let mut gx = if need_x { Some(vec![S::zero(); x.data.len()]) } else { None };
    let mut gw = if need_w { Some(vec![S::zero(); w.data.len()]) } else { None };
    let mut gb = if need_b { Some(vec![S::zero(); out_dim]) } else { None };
    for r in 0..rows {
        let gr = &g[r * out_dim..(r + 1) * out_dim];
        let xr = &x.data[r * in_dim..(r + 1) * in_dim];
        if let Some(gb) = gb.as_mut() {
            for o in 0..out_dim {
                gb[o] = gb[o] + gr[o];
            }
        }
        if let Some(gx) = gx.as_mut() {
            let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
            for o in 0..out_dim {
                let wr = &w.data[o * in_dim..(o + 1) * in_dim];
                let go = gr[o];
                for i in 0..in_dim {
                    gxr[i] = gxr[i] + go * wr[i];
                }
            }
        }
        if let Some(gw) = gw.as_mut() {
            for o in 0..out_dim {
                let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
                let go = gr[o];
                for i in 0..in_dim {
                    gwr[i] = gwr[i] + go * xr[i];
                }
            }
        }
    }
    (gx, gw, gb)
}

struct ConvDims {
    bs: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

fn conv2d_check<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    o: &Conv2dOpts,
) -> Result<ConvDims, TensorError> {
    if x.shape.len() != 4 || w.shape.len() != 4 {
        return Err(shape_err("conv2d", format!("x {:?}, w {:?}", x.shape, w.shape)));
    }
    let (bs, cin, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, cin_g, kh, kw) = (w.shape[0], w.shape[1], w.shape[2], w.shape[3]);
    if o.groups == 0 || cin % o.groups != 0 || cout % o.groups != 0 {
        return Err(arg_err("conv2d", format!("groups {} with cin {cin}, cout {cout}", o.groups)));
    }
    if cin_g != cin / o.groups {
        return Err(shape_err(
            "conv2d",
            format!("weight expects {cin_g} channels per group, input has {}", cin / o.groups),
        ));
    }
    if b.shape != [cout] {
        return Err(shape_err("conv2d", format!("bias {:?} for {cout} filters", b.shape)));
    }
    if o.stride == 0 {
        return Err(arg_err("conv2d", "stride 0"));
    }
    if h + 2 * o.pad < kh || ww + 2 * o.pad < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}x{kw} exceeds padded input {h}x{ww} (pad {})", o.pad),
        ));
    }
    if o.wrap_w && kw > ww + o.pad {
        return Err(shape_err("conv2d", format!("wrapped kernel width {kw} exceeds image {ww}")));
    }
    let oh = (h + 2 * o.pad - kh) / o.stride + 1;
    let ow = (ww + 2 * o.pad - kw) / o.stride + 1;
    Ok(ConvDims { bs, cin, h, w: ww, cout, kh, kw, oh, ow })
}

pub(super) fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    o: &Conv2dOpts,
) -> Result<(Vec<S>, Vec<usize>), TensorError> {
    let d = conv2d_check(x, w, b, o)?;
    let ConvDims { bs, cin, h, w: ww, cout, kh, kw, oh, ow } = d;
    let cin_g = cin / o.groups;
    let cout_g = cout / o.groups;
    let mut out = vec![S::zero(); bs * cout * oh * ow];
    let (hi, wi) = (h as isize, ww as isize);
    for bi in 0..bs {
        for co in 0..cout {
            let grp = co / cout_g;
            let base_out = (bi * cout + co) * oh * ow;
            let bias = b.data[co];
            for v in &mut out[base_out..base_out + oh * ow] {
                *v = bias;
            }
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let xplane = &x.data[(bi * cin + ci) * h * ww..(bi * cin + ci + 1) * h * ww];
                let wbase = ((co * cin_g) + cig) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[wbase + ky * kw + kx];
                        if wv == S::zero() {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = (oy * o.stride + ky) as isize - o.pad as isize;
                            if iy < 0 || iy >= hi {
                                continue;
                            }
                            let xrow = &xplane[iy as usize * ww..(iy as usize + 1) * ww];
                            let orow = &mut out[base_out + oy * ow..base_out + (oy + 1) * ow];
                            for (ox, ov) in orow.iter_mut().enumerate() {
                                let mut ix = (ox * o.stride + kx) as isize - o.pad as isize;
                                if ix < 0 || ix >= wi {
                                    if o.wrap_w {
                                        ix = wrap_i(ix, wi);
                                    } else {
                                        continue;
                                    }
                                }
                                *ov = *ov + wv * xrow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((out, vec![bs, cout, oh, ow]))
}

#[allow(clippy::type_complexity)]
pub(super) fn conv2d_backward<S: Scalar>(
    g: &[S],
    out_shape: &[usize],
    x: &Tensor<S>,
    w: &Tensor<S>,
    o: &Conv2dOpts,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>) {
    let (bs, cin, h, ww) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (cout, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let cin_g = cin / o.groups;
    let cout_g = cout / o.groups;
    let mut gx = if need_x { Some(vec![S::zero(); x.data.len()]) } else { None };
    let mut gw = if need_w { Some(vec![S::zero(); w.data.len()]) } else { None };
    let mut gb = if need_b { Some(vec![S::zero(); cout]) } else { None };
    let (hi, wi) = (h as isize, ww as isize);
    for bi in 0..bs {
        for co in 0..cout {
            let grp = co / cout_g;
            let base_out = (bi * cout + co) * oh * ow;
            if let Some(gb) = gb.as_mut() {
                let mut acc = S::zero();
                for &gv in &g[base_out..base_out + oh * ow] {
                    acc = acc + gv;
                }
                gb[co] = gb[co] + acc;
            }
            if gx.is_none() && gw.is_none() {
                continue;
            }
            for cig in 0..cin_g {
                let ci = grp * cin_g + cig;
                let plane = (bi * cin + ci) * h * ww;
                let wbase = ((co * cin_g) + cig) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data[wbase + ky * kw + kx];
                        let mut wacc = S::zero();
                        for oy in 0..oh {
                            let iy = (oy * o.stride + ky) as isize - o.pad as isize;
                            if iy < 0 || iy >= hi {
                                continue;
                            }
                            let row = plane + iy as usize * ww;
                            for ox in 0..ow {
                                let mut ix = (ox * o.stride + kx) as isize - o.pad as isize;
                                if ix < 0 || ix >= wi {
                                    if o.wrap_w {
                                        ix = wrap_i(ix, wi);
                                    } else {
                                        continue;
                                    }
                                }
                                let gv = g[base_out + oy * ow + ox];
                                let xi = row + ix as usize;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi] = gx[xi] + gv * wv;
                                }
                                wacc = wacc + gv * x.data[xi];
                            }
                        }
                        if let Some(gw) = gw.as_mut() {
                            gw[wbase + ky * kw + kx] = gw[wbase + ky * kw + kx] + wacc;
                        }
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

pub(super) fn maxpool2_forward<S: Scalar>(
    x: &Tensor<S>,
) -> Result<(Vec<S>, Vec<usize>, Vec<u32>), TensorError> {
    if x.shape.len() != 4 {
        return Err(shape_err("maxpool2", format!("{:?}", x.shape)));
    }
    let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(arg_err("maxpool2", format!("odd spatial size {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![S::zero(); bs * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    for p in 0..bs * c {
        let plane = p * h * w;
        let oplane = p * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i00 = plane + (2 * oy) * w + 2 * ox;
                // row-major window order: (0,0), (0,1), (1,0), (1,1);
                // strictly-greater comparison keeps the first maximal element
                let cands = [i00, i00 + 1, i00 + w, i00 + w + 1];
                let mut best = cands[0];
                let mut bv = x.data[best];
                for &cand in &cands[1..] {
                    if x.data[cand] > bv {
                        bv = x.data[cand];
                        best = cand;
                    }
                }
                out[oplane + oy * ow + ox] = bv;
                argmax[oplane + oy * ow + ox] = best as u32;
            }
        }
    }
    Ok((out, vec![bs, c, oh, ow], argmax))
}

pub(super) fn bilinear_resize_forward<S: Scalar>(
    x: &Tensor<S>,
    out_h: usize,
    out_w: usize,
    wrap_w: bool,
) -> Result<(Vec<S>, Vec<usize>), TensorError> {
    if x.shape.len() != 4 {
        return Err(shape_err("bilinear_resize", format!("{:?}", x.shape)));
    }
    if out_h == 0 || out_w == 0 {
        return Err(arg_err("bilinear_resize", "zero output size"));
    }
    let (bs, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let mut out = vec![S::zero(); bs * c * out_h * out_w];
    let taps_y = resize_taps(h, out_h, false);
    let taps_x = resize_taps(w, out_w, wrap_w);
    for p in 0..bs * c {
        let plane = &x.data[p * h * w..(p + 1) * h * w];
        let op = p * out_h * out_w;
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let wy = S::from_f64(fy);
                let wx = S::from_f64(fx);
                let top = plane[y0 * w + x0] * (S::one() - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (S::one() - wx) + plane[y1 * w + x1] * wx;
                out[op + oy * out_w + ox] = top * (S::one() - wy) + bot * wy;
            }
        }
    }
    Ok((out, vec![bs, c, out_h, out_w]))
}

pub(super) fn bilinear_resize_backward<S: Scalar>(
    g: &[S],
    out_shape: &[usize],
    in_shape: &[usize],
    wrap_w: bool,
) -> Vec<S> {
    let (bs, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let taps_y = resize_taps(h, oh, false);
    let taps_x = resize_taps(w, ow, wrap_w);
    let mut gx = vec![S::zero(); bs * c * h * w];
    for p in 0..bs * c {
        let plane = p * h * w;
        let op = p * oh * ow;
        for (oy, &(y0, y1, fy)) in taps_y.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps_x.iter().enumerate() {
                let gv = g[op + oy * ow + ox];
                let wy = S::from_f64(fy);
                let wx = S::from_f64(fx);
                let gt = gv * (S::one() - wy);
                let gb = gv * wy;
                gx[plane + y0 * w + x0] = gx[plane + y0 * w + x0] + gt * (S::one() - wx);
                gx[plane + y0 * w + x1] = gx[plane + y0 * w + x1] + gt * wx;
                gx[plane + y1 * w + x0] = gx[plane + y1 * w + x0] + gb * (S::one() - wx);
                gx[plane + y1 * w + x1] = gx[plane + y1 * w + x1] + gb * wx;
            }
        }
    }
    gx
}

/// Per output index: source indices (i0, i1) and the blend fraction, with
/// half-pixel centers. Border handling is clamp, or wrap along the width.
fn resize_taps(in_n: usize, out_n: usize, wrap: bool) -> Vec<(usize, usize, f64)> {
    let scale = in_n as f64 / out_n as f64;
    (0..out_n)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            if wrap {
                let srcw = src.rem_euclid(in_n as f64);
                let i0 = srcw.floor() as usize % in_n;
                let i1 = (i0 + 1) % in_n;
                (i0, i1, srcw - srcw.floor())
            } else {
                let s = src.clamp(0.0, (in_n - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(in_n - 1);
                (i0, i1, s - i0 as f64)
            }
        })
        .collect()
}
