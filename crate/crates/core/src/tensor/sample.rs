//! Bilinear feature sampling at fractional pixel coordinates, the gather at
//! the heart of deformable spherical attention.
//!
//! Coordinates are in pixel units with integer values at pixel centers.
//! u wraps modulo the feature width (longitude seam); v clamps to the first
//! and last row (there is nothing beyond the poles). Gradients flow both to
//! the sampled features and to the coordinates; the coordinate derivative is
//! zero where v is clamped.

use super::{shape_err, Scalar, Tensor, TensorError};

struct Taps {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f64,
    wy: f64,
    /// false when v left the image and was clamped (d out / d v = 0 there)
    v_free: bool,
}

#[inline]
fn taps(u: f64, v: f64, h: usize, w: usize) -> Taps {
    let uw = u.rem_euclid(w as f64);
    // rem_euclid(w) can return w exactly when u is a tiny negative number
    let uw = if uw >= w as f64 { 0.0 } else { uw };
    let x0 = uw.floor() as usize;
    let x1 = (x0 + 1) % w;
    let hmax = (h - 1) as f64;
    let v_free = (0.0..=hmax).contains(&v);
    let vc = v.clamp(0.0, hmax);
    let y0 = vc.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    Taps { x0, x1, y0, y1, wx: uw - x0 as f64, wy: vc - y0 as f64, v_free }
}

pub(super) fn sample_forward<S: Scalar>(
    feat: &Tensor<S>,
    coords: &Tensor<S>,
) -> Result<(Vec<S>, Vec<usize>), TensorError> {
    if feat.shape.len() != 4 || coords.shape.len() != 5 || coords.shape[2] != 2 {
        return Err(shape_err(
            "sample_bilinear",
            format!("feat {:?}, coords {:?} (want [B,C,H,W] and [B,K,2,Hq,Wq])", feat.shape, coords.shape),
        ));
    }
    if feat.shape[0] != coords.shape[0] {
        return Err(shape_err(
            "sample_bilinear",
            format!("batch {} vs {}", feat.shape[0], coords.shape[0]),
        ));
    }
    let (bs, c, h, w) = (feat.shape[0], feat.shape[1], feat.shape[2], feat.shape[3]);
    let (k, hq, wq) = (coords.shape[1], coords.shape[3], coords.shape[4]);
    let q = hq * wq;
    let mut out = vec![S::zero(); bs * c * k * q];
    for b in 0..bs {
        let cbase = b * k * 2 * q;
        for ki in 0..k {
            for qi in 0..q {
                let u = coords.data[cbase + (ki * 2) * q + qi].into_f64();
                let v = coords.data[cbase + (ki * 2 + 1) * q + qi].into_f64();
                let t = taps(u, v, h, w);
                let (wx, wy) = (S::from_f64(t.wx), S::from_f64(t.wy));
                for ci in 0..c {
                    let plane = &feat.data[(b * c + ci) * h * w..(b * c + ci + 1) * h * w];
                    let top = plane[t.y0 * w + t.x0] * (S::one() - wx) + plane[t.y0 * w + t.x1] * wx;
                    let bot = plane[t.y1 * w + t.x0] * (S::one() - wx) + plane[t.y1 * w + t.x1] * wx;
                    out[((b * c + ci) * k + ki) * q + qi] = top * (S::one() - wy) + bot * wy;
                }
            }
        }
    }
    Ok((out, vec![bs, c, k, hq, wq]))
}

#[allow(clippy::type_complexity)]
pub(super) fn sample_backward<S: Scalar>(
    g: &[S],
    feat: &Tensor<S>,
    coords: &Tensor<S>,
    need_feat: bool,
    need_coords: bool,
) -> (Option<Vec<S>>, Option<Vec<S>>) {
    let (bs, c, h, w) = (feat.shape[0], feat.shape[1], feat.shape[2], feat.shape[3]);
    let (k, hq, wq) = (coords.shape[1], coords.shape[3], coords.shape[4]);
    let q = hq * wq;
    let mut gf = if need_feat { Some(vec![S::zero(); feat.data.len()]) } else { None };
    let mut gc = if need_coords { Some(vec![S::zero(); coords.data.len()]) } else { None };
    for b in 0..bs {
        let cbase = b * k * 2 * q;
        for ki in 0..k {
            for qi in 0..q {
                let u = coords.data[cbase + (ki * 2) * q + qi].into_f64();
                let v = coords.data[cbase + (ki * 2 + 1) * q + qi].into_f64();
                let t = taps(u, v, h, w);
                let (wx, wy) = (S::from_f64(t.wx), S::from_f64(t.wy));
                let mut du = S::zero();
                let mut dv = S::zero();
                for ci in 0..c {
                    let gv = g[((b * c + ci) * k + ki) * q + qi];
                    let pbase = (b * c + ci) * h * w;
                    let f00 = feat.data[pbase + t.y0 * w + t.x0];
                    let f01 = feat.data[pbase + t.y0 * w + t.x1];
                    let f10 = feat.data[pbase + t.y1 * w + t.x0];
                    let f11 = feat.data[pbase + t.y1 * w + t.x1];
                    if let Some(gf) = gf.as_mut() {
                        gf[pbase + t.y0 * w + t.x0] =
                            gf[pbase + t.y0 * w + t.x0] + gv * (S::one() - wy) * (S::one() - wx);
                        gf[pbase + t.y0 * w + t.x1] =
                            gf[pbase + t.y0 * w + t.x1] + gv * (S::one() - wy) * wx;
                        gf[pbase + t.y1 * w + t.x0] =
                            gf[pbase + t.y1 * w + t.x0] + gv * wy * (S::one() - wx);
                        gf[pbase + t.y1 * w + t.x1] = gf[pbase + t.y1 * w + t.x1] + gv * wy * wx;
                    }
                    if gc.is_some() {
                        du = du + gv * ((S::one() - wy) * (f01 - f00) + wy * (f11 - f10));
                        if t.v_free {
                            dv = dv + gv * ((S::one() - wx) * (f10 - f00) + wx * (f11 - f01));
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    gc[cbase + (ki * 2) * q + qi] = gc[cbase + (ki * 2) * q + qi] + du;
                    gc[cbase + (ki * 2 + 1) * q + qi] = gc[cbase + (ki * 2 + 1) * q + qi] + dv;
                }
            }
        }
    }
    (gf, gc)
}
