//! The training objective: masked multi-scale supervision for depth and
//! normals, gradient matching, angular terms and a seeded random-feature
//! perceptual loss, combined by fixed weights.
//!
//! Conventions shared by every term:
//!
//! * Ground truth lives in a [`SupervisionPyramid`] built once per sample by
//!   [`build_pyramid`]. Depth is stored in the same normalized units the
//!   depth head predicts; the training pipeline divides meters by `d_max`
//!   before building the pyramid.
//! * Predictions arrive coarse to fine, matching `net::Predictions`.
//! * Every mean is taken over valid pixels only, then summed over scales, so
//!   loss magnitudes do not depend on resolution.
//! * Predicted normals are rescaled to unit length before any normal term;
//!   the raw head output is a free 3-vector in (-1, 1)^3.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::net::Predictions;
use crate::tensor::{Conv2dOpts, Scalar, Tape, Tensor, TensorId};
use crate::{Error, Result};

/// Floor applied to a normal's length before dividing by it.
pub const NORM_FLOOR: f64 = 1e-8;

/// A pooled 2x2 normal shorter than this cannot be meaningfully rescaled
/// (the four contributors nearly cancel), so the pixel is marked invalid.
const DEGENERATE_NORMAL: f64 = 1e-6;

/// Per-term weights for [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub depth_mse: f64,
    pub depth_grad: f64,
    pub depth_perceptual: f64,
    pub normal_mse: f64,
    pub normal_angle: f64,
    pub normal_perceptual: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            depth_mse: 2.0,
            depth_grad: 1.0,
            depth_perceptual: 0.05,
            normal_mse: 1.0,
            normal_angle: 10.0,
            normal_perceptual: 0.05,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.depth_mse,
            self.depth_grad,
            self.depth_perceptual,
            self.normal_mse,
            self.normal_angle,
            self.normal_perceptual,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("loss weights must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Ground truth at one scale. Invalid pixels hold zeros in both maps.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel<S> {
    pub height: usize,
    pub width: usize,
    /// Row-major `[h*w]`, normalized depth units.
    pub depth: Vec<S>,
    /// Channel-major `[3*h*w]`; unit length wherever the mask is set.
    pub normal: Vec<S>,
    pub mask: Vec<bool>,
}

impl<S: Scalar> PyramidLevel<S> {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Ground truth for one sample at every supervised scale, coarse to fine.
/// `levels.last()` is full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionPyramid<S> {
    pub levels: Vec<PyramidLevel<S>>,
}

impl<S: Scalar> SupervisionPyramid<S> {
    pub fn finest(&self) -> &PyramidLevel<S> {
        self.levels.last().expect("pyramid has at least one level")
    }
}

fn renorm_host<S: Scalar>(level: &mut PyramidLevel<S>) {
    let n = level.height * level.width;
    for i in 0..n {
        if !level.mask[i] {
            level.depth[i] = S::zero();
            for c in 0..3 {
                level.normal[c * n + i] = S::zero();
            }
            continue;
        }
        let v = [
            level.normal[i].into_f64(),
            level.normal[n + i].into_f64(),
            level.normal[2 * n + i].into_f64(),
        ];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if len < DEGENERATE_NORMAL {
            level.mask[i] = false;
            level.depth[i] = S::zero();
            for c in 0..3 {
                level.normal[c * n + i] = S::zero();
            }
        } else {
            for c in 0..3 {
                level.normal[c * n + i] = S::from_f64(v[c] / len);
            }
        }
    }
}

/// One 2x2 pooling step. The coarse value averages the valid contributors;
/// the coarse mask requires all four to be valid.
fn pool_level<S: Scalar>(fine: &PyramidLevel<S>) -> PyramidLevel<S> {
    let (h, w) = (fine.height / 2, fine.width / 2);
    let (fh, fw) = (fine.height, fine.width);
    let fn_px = fh * fw;
    let n = h * w;
    let mut out = PyramidLevel {
        height: h,
        width: w,
        depth: vec![S::zero(); n],
        normal: vec![S::zero(); 3 * n],
        mask: vec![false; n],
    };
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let mut cnt = 0usize;
            let mut d = 0.0f64;
            let mut nv = [0.0f64; 3];
            let mut all = true;
            for dy in 0..2 {
                for dx in 0..2 {
                    let fi = (2 * y + dy) * fw + 2 * x + dx;
                    if fine.mask[fi] {
                        cnt += 1;
                        d += fine.depth[fi].into_f64();
                        for c in 0..3 {
                            nv[c] += fine.normal[c * fn_px + fi].into_f64();
                        }
                    } else {
                        all = false;
                    }
                }
            }
            if cnt > 0 {
                out.depth[i] = S::from_f64(d / cnt as f64);
                for c in 0..3 {
                    out.normal[c * n + i] = S::from_f64(nv[c] / cnt as f64);
                }
            }
            out.mask[i] = all;
        }
    }
    renorm_host(&mut out);
    out
}

/// Build the supervision pyramid from full-resolution ground truth.
///
/// `depth` is `[h*w]` row-major, `normal` is `[3*h*w]` channel-major. Each
/// coarser level halves both sides: depth and normals are 2x2 averages of
/// the valid contributors, the mask survives only where all four were valid,
/// and normals are rescaled to unit length afterwards.
pub fn build_pyramid<S: Scalar>(
    depth: &[S],
    normal: &[S],
    mask: &[bool],
    height: usize,
    width: usize,
    scales: usize,
) -> Result<SupervisionPyramid<S>> {
    if scales == 0 {
        return Err(Error::invalid("pyramid needs at least one scale"));
    }
    let factor = 1usize << (scales - 1);
    if height % factor != 0 || width % factor != 0 || height < factor || width < factor {
        return Err(Error::invalid(format!(
            "{height}x{width} cannot be halved {} times",
            scales - 1
        )));
    }
    let n = height * width;
    if depth.len() != n || normal.len() != 3 * n || mask.len() != n {
        return Err(Error::invalid("ground-truth buffer sizes do not match the resolution"));
    }
    let mut finest = PyramidLevel {
        height,
        width,
        depth: depth.to_vec(),
        normal: normal.to_vec(),
        mask: mask.to_vec(),
    };
    renorm_host(&mut finest);
    let mut levels = vec![finest];
    for _ in 1..scales {
        let next = pool_level(levels.last().expect("nonempty"));
        levels.push(next);
    }
    levels.reverse();
    Ok(SupervisionPyramid { levels })
}

/// 3x3 erosion: a pixel survives only if its full neighborhood is valid,
/// wrapping in x and treating off-image rows as invalid.
fn erode3x3_wrap(mask: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for y in 0..h {
        if y == 0 || y + 1 == h {
            continue;
        }
        'px: for x in 0..w {
            for dy in [-1i64, 0, 1] {
                for dx in [-1i64, 0, 1] {
                    let yy = (y as i64 + dy) as usize;
                    let xx = (x as i64 + dx).rem_euclid(w as i64) as usize;
                    if !mask[yy * w + xx] {
                        continue 'px;
                    }
                }
            }
            out[y * w + x] = true;
        }
    }
    out
}

/// The same scale of every pyramid in the batch, checked for equal sizes.
fn level_batch<'a, S: Scalar>(
    pyramids: &'a [SupervisionPyramid<S>],
    scale: usize,
    scales_expected: usize,
) -> Result<Vec<&'a PyramidLevel<S>>> {
    if pyramids.is_empty() {
        return Err(Error::invalid("empty ground-truth batch"));
    }
    let mut out = Vec::with_capacity(pyramids.len());
    for p in pyramids {
        if p.levels.len() != scales_expected {
            return Err(Error::invalid(format!(
                "pyramid has {} levels, predictions have {scales_expected}",
                p.levels.len()
            )));
        }
        out.push(&p.levels[scale]);
    }
    let (h, w) = (out[0].height, out[0].width);
    if out.iter().any(|l| l.height != h || l.width != w) {
        return Err(Error::invalid("pyramids in a batch must share resolutions"));
    }
    Ok(out)
}

fn check_pred_shape<S: Scalar>(
    tape: &Tape<S>,
    pred: TensorId,
    channels: usize,
    levels: &[&PyramidLevel<S>],
    what: &str,
) -> Result<()> {
    let want = [levels.len(), channels, levels[0].height, levels[0].width];
    if tape.shape(pred) != want {
        return Err(Error::invalid(format!(
            "{what} prediction is {:?}, ground truth wants {want:?}",
            tape.shape(pred)
        )));
    }
    Ok(())
}

fn depth_const<S: Scalar>(
    tape: &mut Tape<S>,
    levels: &[&PyramidLevel<S>],
) -> Result<TensorId> {
    let (h, w) = (levels[0].height, levels[0].width);
    let mut data = Vec::with_capacity(levels.len() * h * w);
    for l in levels {
        data.extend_from_slice(&l.depth);
    }
    Ok(tape.constant(Tensor::new(vec![levels.len(), 1, h, w], data)?)?)
}

fn normal_const<S: Scalar>(
    tape: &mut Tape<S>,
    levels: &[&PyramidLevel<S>],
) -> Result<TensorId> {
    let (h, w) = (levels[0].height, levels[0].width);
    let mut data = Vec::with_capacity(levels.len() * 3 * h * w);
    for l in levels {
        data.extend_from_slice(&l.normal);
    }
    Ok(tape.constant(Tensor::new(vec![levels.len(), 3, h, w], data)?)?)
}

fn mask_const<S: Scalar>(
    tape: &mut Tape<S>,
    masks: &[Vec<bool>],
    h: usize,
    w: usize,
) -> Result<TensorId> {
    let mut data = Vec::with_capacity(masks.len() * h * w);
    for m in masks {
        data.extend(m.iter().map(|&v| if v { S::one() } else { S::zero() }));
    }
    Ok(tape.constant(Tensor::new(vec![masks.len(), 1, h, w], data)?)?)
}

/// Mean of `x` over pixels where `mask` is 1 (`m` of them), all batches pooled.
fn masked_mean<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    mask: TensorId,
    m: usize,
) -> Result<TensorId> {
    let kept = tape.mul(x, mask)?;
    let s = tape.sum_all(kept)?;
    Ok(tape.mul_scalar(s, 1.0 / m as f64)?)
}

/// Rescale each pixel's 3-vector along axis 1 to unit length. Lengths are
/// floored at [`NORM_FLOOR`] so the zero vector maps to zero instead of NaN.
pub fn renormalize_normals<S: Scalar>(
    tape: &mut Tape<S>,
    n: TensorId,
) -> Result<TensorId> {
    let len = tape.vec_norm(n, 1)?;
    let safe = tape.clamp(len, NORM_FLOOR, f64::INFINITY)?;
    Ok(tape.div(n, safe)?)
}

/// Mean squared depth error at the finest scale over valid pixels.
pub fn loss_depth_mse<S: Scalar>(
    tape: &mut Tape<S>,
    pred_finest: TensorId,
    pyramids: &[SupervisionPyramid<S>],
) -> Result<TensorId> {
    let scales = pyramids
        .first()
        .map(|p| p.levels.len())
        .ok_or_else(|| Error::invalid("empty ground-truth batch"))?;
    let levels = level_batch(pyramids, scales - 1, scales)?;
    check_pred_shape(tape, pred_finest, 1, &levels, "depth")?;
    let m: usize = levels.iter().map(|l| l.valid_count()).sum();
    if m == 0 {
        return Err(Error::invalid("depth mse: no valid pixels"));
    }
    let gt = depth_const(tape, &levels)?;
    let masks: Vec<Vec<bool>> = levels.iter().map(|l| l.mask.clone()).collect();
    let mask = mask_const(tape, &masks, levels[0].height, levels[0].width)?;
    let diff = tape.sub(pred_finest, gt)?;
    let sq = tape.mul(diff, diff)?;
    masked_mean(tape, sq, mask, m)
}

/// Per-pixel cosine of the angle between two unit normal fields, `[B,1,h,w]`.
fn normal_dot<S: Scalar>(
    tape: &mut Tape<S>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let prod = tape.mul(a, b)?;
    Ok(tape.sum_axis(prod, 1, true)?)
}

/// Sum over scales of the mean squared angular error (radians^2) between
/// rescaled predicted normals and ground truth.
pub fn loss_normal_mse<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[TensorId],
    pyramids: &[SupervisionPyramid<S>],
) -> Result<TensorId> {
    if preds.is_empty() {
        return Err(Error::invalid("no normal predictions"));
    }
    let mut total: Option<TensorId> = None;
    for (scale, &pred) in preds.iter().enumerate() {
        let levels = level_batch(pyramids, scale, preds.len())?;
        check_pred_shape(tape, pred, 3, &levels, "normal")?;
        let m: usize = levels.iter().map(|l| l.valid_count()).sum();
        if m == 0 {
            return Err(Error::invalid(format!("normal mse: no valid pixels at scale {scale}")));
        }
        let unit = renormalize_normals(tape, pred)?;
        let gt = normal_const(tape, &levels)?;
        let dot = normal_dot(tape, unit, gt)?;
        let ang = tape.acos_clamped(dot)?;
        let sq = tape.mul(ang, ang)?;
        let masks: Vec<Vec<bool>> = levels.iter().map(|l| l.mask.clone()).collect();
        let mask = mask_const(tape, &masks, levels[0].height, levels[0].width)?;
        let term = masked_mean(tape, sq, mask, m)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Channel-wise cross product of two `[B,3,h,w]` fields.
fn cross_fields<S: Scalar>(
    tape: &mut Tape<S>,
    a: TensorId,
    b: TensorId,
) -> Result<TensorId> {
    let ax = tape.narrow(a, 1, 0, 1)?;
    let ay = tape.narrow(a, 1, 1, 1)?;
    let az = tape.narrow(a, 1, 2, 1)?;
    let bx = tape.narrow(b, 1, 0, 1)?;
    let by = tape.narrow(b, 1, 1, 1)?;
    let bz = tape.narrow(b, 1, 2, 1)?;
    let cx = {
        let p = tape.mul(ay, bz)?;
        let q = tape.mul(az, by)?;
        tape.sub(p, q)?
    };
    let cy = {
        let p = tape.mul(az, bx)?;
        let q = tape.mul(ax, bz)?;
        tape.sub(p, q)?
    };
    let cz = {
        let p = tape.mul(ax, by)?;
        let q = tape.mul(ay, bx)?;
        tape.sub(p, q)?
    };
    Ok(tape.concat(&[cx, cy, cz], 1)?)
}

/// Sum over scales of the mean angle (radians) between rescaled predicted
/// normals and ground truth, computed as atan2(|n_hat x n|, n_hat . n).
/// Unlike an arccos of the dot product this stays well conditioned near
/// parallel vectors, and the atan2 form needs no division guard.
pub fn loss_normal_angle<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[TensorId],
    pyramids: &[SupervisionPyramid<S>],
) -> Result<TensorId> {
    if preds.is_empty() {
        return Err(Error::invalid("no normal predictions"));
    }
    let mut total: Option<TensorId> = None;
    for (scale, &pred) in preds.iter().enumerate() {
        let levels = level_batch(pyramids, scale, preds.len())?;
        check_pred_shape(tape, pred, 3, &levels, "normal")?;
        let m: usize = levels.iter().map(|l| l.valid_count()).sum();
        if m == 0 {
            return Err(Error::invalid(format!(
                "normal angle: no valid pixels at scale {scale}"
            )));
        }
        let unit = renormalize_normals(tape, pred)?;
        let gt = normal_const(tape, &levels)?;
        let cross = cross_fields(tape, unit, gt)?;
        let sin = tape.vec_norm(cross, 1)?;
        let cos = normal_dot(tape, unit, gt)?;
        let ang = tape.atan2(sin, cos)?;
        let masks: Vec<Vec<bool>> = levels.iter().map(|l| l.mask.clone()).collect();
        let mask = mask_const(tape, &masks, levels[0].height, levels[0].width)?;
        let term = masked_mean(tape, ang, mask, m)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Sum over scales of the mean absolute difference between the Sobel
/// gradient magnitudes of predicted and ground-truth depth. Convolutions
/// wrap in longitude; a pixel counts only when its whole 3x3 neighborhood
/// is valid, so border rows and pixels next to holes never contribute.
/// A scale with no such pixels contributes zero.
pub fn loss_depth_grad<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &[TensorId],
    pyramids: &[SupervisionPyramid<S>],
) -> Result<TensorId> {
    if preds.is_empty() {
        return Err(Error::invalid("no depth predictions"));
    }
    let opts = Conv2dOpts { stride: 1, pad: 1, wrap_w: true, groups: 1 };
    let wx = tape.constant(Tensor::from_f64s(&[1, 1, 3, 3], &SOBEL_X)?)?;
    let wy = tape.constant(Tensor::from_f64s(&[1, 1, 3, 3], &SOBEL_Y)?)?;
    let zb = tape.constant(Tensor::zeros(&[1]))?;
    let mut total: Option<TensorId> = None;
    for (scale, &pred) in preds.iter().enumerate() {
        let levels = level_batch(pyramids, scale, preds.len())?;
        check_pred_shape(tape, pred, 1, &levels, "depth")?;
        let (h, w) = (levels[0].height, levels[0].width);
        let eroded: Vec<Vec<bool>> =
            levels.iter().map(|l| erode3x3_wrap(&l.mask, h, w)).collect();
        let m: usize = eroded.iter().map(|e| e.iter().filter(|v| **v).count()).sum();
        if m == 0 {
            continue;
        }
        let gt = depth_const(tape, &levels)?;
        let mask = mask_const(tape, &eroded, h, w)?;
        let mut term: Option<TensorId> = None;
        for &k in &[wx, wy] {
            let gp = tape.conv2d(pred, k, zb, opts)?;
            let gg = tape.conv2d(gt, k, zb, opts)?;
            let ap = tape.abs(gp)?;
            let ag = tape.abs(gg)?;
            let d = tape.sub(ag, ap)?;
            let ad = tape.abs(d)?;
            term = Some(match term {
                Some(t) => tape.add(t, ad)?,
                None => ad,
            });
        }
        let summed = masked_mean(tape, term.expect("two kernels"), mask, m)?;
        total = Some(match total {
            Some(t) => tape.add(t, summed)?,
            None => summed,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(S::zero()))?,
    })
}

/// Which map a perceptual loss compares; depth is replicated to three
/// channels so both kinds share one extractor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerceptualKind {
    Depth,
    Normal,
}

/// A fixed, seeded, untrained feature extractor: three 3x3 convolutions with
/// stride 2 (wrapped in longitude), each followed by GELU. Channels run
/// 3 -> 8 -> 16 -> 16. The weights are frozen; only the seed identifies them.
#[derive(Debug, Clone)]
pub struct PerceptualNet<S: Scalar> {
    layers: Vec<(Tensor<S>, Tensor<S>)>,
    pub seed: u64,
}

impl<S: Scalar> PerceptualNet<S> {
    pub fn new(seed: u64) -> Self {
        Self::with_channels(seed, &[8, 16, 16])
    }

    pub(crate) fn with_channels(seed: u64, channels: &[usize]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(channels.len());
        let mut cin = 3usize;
        for &cout in channels {
            let fan_in = cin * 9;
            let dist = rand_distr::Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt())
                .expect("finite std");
            let data: Vec<S> =
                (0..cout * cin * 9).map(|_| S::from_f64(dist.sample(&mut rng))).collect();
            let w = Tensor::new(vec![cout, cin, 3, 3], data).expect("consistent size");
            layers.push((w, Tensor::zeros(&[cout])));
            cin = cout;
        }
        PerceptualNet { layers, seed }
    }

    #[cfg(test)]
    pub(crate) fn from_layers(layers: Vec<(Tensor<S>, Tensor<S>)>) -> Self {
        PerceptualNet { layers, seed: 0 }
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().expect("nonempty").0.shape[0]
    }

    /// Deepest feature map for a `[B,3,h,w]` input.
    fn features(&self, tape: &mut Tape<S>, x: TensorId) -> Result<TensorId> {
        let opts = Conv2dOpts { stride: 2, pad: 1, wrap_w: true, groups: 1 };
        let mut cur = x;
        for (w, b) in &self.layers {
            let wid = tape.constant(w.clone())?;
            let bid = tape.constant(b.clone())?;
            let conv = tape.conv2d(cur, wid, bid, opts)?;
            cur = tape.gelu(conv)?;
        }
        Ok(cur)
    }
}

/// Feature-space squared error at the finest scale: both maps are zeroed on
/// invalid pixels, pushed through the frozen extractor, and compared by the
/// mean over all feature elements. For one sample that mean equals
/// sum(|delta phi|^2) / (C * M) with C the feature channels and M the
/// feature pixels; batches average their per-sample values.
pub fn loss_perceptual<S: Scalar>(
    tape: &mut Tape<S>,
    pred_finest: TensorId,
    kind: PerceptualKind,
    pyramids: &[SupervisionPyramid<S>],
    net: &PerceptualNet<S>,
) -> Result<TensorId> {
    let scales = pyramids
        .first()
        .map(|p| p.levels.len())
        .ok_or_else(|| Error::invalid("empty ground-truth batch"))?;
    let levels = level_batch(pyramids, scales - 1, scales)?;
    let (h, w) = (levels[0].height, levels[0].width);
    let masks: Vec<Vec<bool>> = levels.iter().map(|l| l.mask.clone()).collect();
    let mask = mask_const(tape, &masks, h, w)?;
    let (p3, g3) = match kind {
        PerceptualKind::Depth => {
            check_pred_shape(tape, pred_finest, 1, &levels, "depth")?;
            let gt = depth_const(tape, &levels)?;
            let p = tape.concat(&[pred_finest, pred_finest, pred_finest], 1)?;
            let g = tape.concat(&[gt, gt, gt], 1)?;
            (p, g)
        }
        PerceptualKind::Normal => {
            check_pred_shape(tape, pred_finest, 3, &levels, "normal")?;
            let unit = renormalize_normals(tape, pred_finest)?;
            (unit, normal_const(tape, &levels)?)
        }
    };
    let mp = tape.mul(p3, mask)?;
    let mg = tape.mul(g3, mask)?;
    let fp = net.features(tape, mp)?;
    let fg = net.features(tape, mg)?;
    let d = tape.sub(fp, fg)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean_all(sq)?)
}

/// Per-term values (present only for the active task branches) next to the
/// weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub depth_mse: Option<f64>,
    pub depth_grad: Option<f64>,
    pub depth_perceptual: Option<f64>,
    pub normal_mse: Option<f64>,
    pub normal_angle: Option<f64>,
    pub normal_perceptual: Option<f64>,
    pub total: f64,
}

pub struct TotalLoss {
    /// Backpropagate this.
    pub total: TensorId,
    pub breakdown: LossBreakdown,
}

/// Weighted sum of every term the prediction set supports. Depth terms run
/// when depth predictions exist, normal terms when normal predictions exist;
/// zero weights still report their term's value but contribute nothing.
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    preds: &Predictions,
    pyramids: &[SupervisionPyramid<S>],
    weights: &LossWeights,
    perceptual: &PerceptualNet<S>,
) -> Result<TotalLoss> {
    weights.validate()?;
    if preds.depth.is_empty() && preds.normal.is_empty() {
        return Err(Error::invalid("predictions are empty"));
    }
    let mut total: Option<TensorId> = None;
    let mut add_term = |tape: &mut Tape<S>, term: TensorId, lambda: f64| -> Result<f64> {
        let scaled = tape.mul_scalar(term, lambda)?;
        total = Some(match total {
            Some(t) => tape.add(t, scaled)?,
            None => scaled,
        });
        Ok(tape.item(term).into_f64())
    };
    let mut bd = LossBreakdown {
        depth_mse: None,
        depth_grad: None,
        depth_perceptual: None,
        normal_mse: None,
        normal_angle: None,
        normal_perceptual: None,
        total: 0.0,
    };
    if let Some(&finest) = preds.depth.last() {
        let t = loss_depth_mse(tape, finest, pyramids)?;
        bd.depth_mse = Some(add_term(tape, t, weights.depth_mse)?);
        let t = loss_depth_grad(tape, &preds.depth, pyramids)?;
        bd.depth_grad = Some(add_term(tape, t, weights.depth_grad)?);
        let t = loss_perceptual(tape, finest, PerceptualKind::Depth, pyramids, perceptual)?;
        bd.depth_perceptual = Some(add_term(tape, t, weights.depth_perceptual)?);
    }
    if let Some(&finest) = preds.normal.last() {
        let t = loss_normal_mse(tape, &preds.normal, pyramids)?;
        bd.normal_mse = Some(add_term(tape, t, weights.normal_mse)?);
        let t = loss_normal_angle(tape, &preds.normal, pyramids)?;
        bd.normal_angle = Some(add_term(tape, t, weights.normal_angle)?);
        let t = loss_perceptual(tape, finest, PerceptualKind::Normal, pyramids, perceptual)?;
        bd.normal_perceptual = Some(add_term(tape, t, weights.normal_perceptual)?);
    }
    let total = total.expect("at least one branch active");
    bd.total = tape.item(total).into_f64();
    Ok(TotalLoss { total, breakdown: bd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::arg_err;
    use crate::tensor::gradcheck::grad_check;
    use rand::Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_unit(r: &mut ChaCha8Rng) -> [f64; 3] {
        loop {
            let v: [f64; 3] = [
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
                r.gen_range(-1.0..1.0),
            ];
            let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if l > 0.2 {
                return [v[0] / l, v[1] / l, v[2] / l];
            }
        }
    }

    /// Random ground truth: depth in (0.1, 0.9), unit normals, a few holes.
    fn random_gt(
        seed: u64,
        h: usize,
        w: usize,
        holes: usize,
    ) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
        let mut r = rng(seed);
        let n = h * w;
        let depth: Vec<f64> = (0..n).map(|_| r.gen_range(0.1..0.9)).collect();
        let mut normal = vec![0.0; 3 * n];
        for i in 0..n {
            let u = rand_unit(&mut r);
            for c in 0..3 {
                normal[c * n + i] = u[c];
            }
        }
        let mut mask = vec![true; n];
        for _ in 0..holes {
            let i = r.gen_range(0..n);
            mask[i] = false;
        }
        (depth, normal, mask)
    }

    fn pyramid_from(
        seed: u64,
        h: usize,
        w: usize,
        scales: usize,
        holes: usize,
    ) -> SupervisionPyramid<f64> {
        let (d, nrm, m) = random_gt(seed, h, w, holes);
        build_pyramid(&d, &nrm, &m, h, w, scales).expect("valid gt")
    }

    /// Leaf tensor of the given shape with entries drawn from (lo, hi).
    fn leaf(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
        Tensor::new(shape.to_vec(), data).expect("sized").with_grad()
    }

    /// Predictions shaped like the pyramid's levels, coarse to fine.
    fn pred_stack(
        r: &mut ChaCha8Rng,
        pyr: &SupervisionPyramid<f64>,
        channels: usize,
        lo: f64,
        hi: f64,
    ) -> Vec<Tensor<f64>> {
        pyr.levels
            .iter()
            .map(|l| leaf(r, &[1, channels, l.height, l.width], lo, hi))
            .collect()
    }

    #[test]
    fn default_weights_match_the_training_mix() {
        let w = LossWeights::default();
        assert_eq!(
            (w.depth_mse, w.depth_grad, w.depth_perceptual),
            (2.0, 1.0, 0.05)
        );
        assert_eq!((w.normal_mse, w.normal_angle, w.normal_perceptual), (1.0, 10.0, 0.05));
        assert!(w.validate().is_ok());
        assert!(LossWeights { depth_mse: -0.1, ..w }.validate().is_err());
    }

    #[test]
    fn pyramid_pools_masks_and_renormalizes() {
        // Constant all-valid input stays constant with full masks.
        let (h, w) = (8, 16);
        let n = h * w;
        let depth = vec![0.5f64; n];
        let mut normal = vec![0.0f64; 3 * n];
        for i in 0..n {
            normal[2 * n + i] = -1.0;
        }
        let pyr = build_pyramid(&depth, &normal, &vec![true; n], h, w, 3).unwrap();
        assert_eq!(pyr.levels.len(), 3);
        assert_eq!((pyr.levels[0].height, pyr.levels[0].width), (2, 4));
        for l in &pyr.levels {
            assert!(l.mask.iter().all(|&m| m));
            assert!(l.depth.iter().all(|&d| (d - 0.5).abs() < 1e-12));
            let ln = l.height * l.width;
            for i in 0..ln {
                assert!((l.normal[2 * ln + i] + 1.0).abs() < 1e-12);
            }
        }

        // One hole invalidates exactly its parent at the next scale.
        let mut mask = vec![true; n];
        mask[3 * w + 5] = false;
        let pyr = build_pyramid(&depth, &normal, &mask, h, w, 2).unwrap();
        let coarse = &pyr.levels[0];
        assert_eq!((coarse.height, coarse.width), (4, 8));
        for y in 0..4 {
            for x in 0..8 {
                assert_eq!(coarse.mask[y * 8 + x], !(y == 1 && x == 2), "at {y},{x}");
            }
        }

        // Random maps match a straight loop oracle.
        let (d, nrm, m) = random_gt(11, h, w, 20);
        let pyr = build_pyramid(&d, &nrm, &m, h, w, 2).unwrap();
        let coarse = &pyr.levels[0];
        let cn = 4 * 8;
        for y in 0..4 {
            for x in 0..8 {
                let i = y * 8 + x;
                let quad = [
                    2 * y * w + 2 * x,
                    2 * y * w + 2 * x + 1,
                    (2 * y + 1) * w + 2 * x,
                    (2 * y + 1) * w + 2 * x + 1,
                ];
                let valid: Vec<usize> = quad.iter().copied().filter(|&q| m[q]).collect();
                assert_eq!(coarse.mask[i], valid.len() == 4);
                if valid.is_empty() {
                    assert_eq!(coarse.depth[i], 0.0);
                    continue;
                }
                let want: f64 =
                    valid.iter().map(|&q| d[q]).sum::<f64>() / valid.len() as f64;
                if coarse.mask[i] {
                    assert!((coarse.depth[i] - want).abs() < 1e-12);
                    let mut nv = [0.0; 3];
                    for c in 0..3 {
                        nv[c] =
                            valid.iter().map(|&q| nrm[c * h * w + q]).sum::<f64>() / 4.0;
                    }
                    let len = (nv[0] * nv[0] + nv[1] * nv[1] + nv[2] * nv[2]).sqrt();
                    for c in 0..3 {
                        assert!((coarse.normal[c * cn + i] - nv[c] / len).abs() < 1e-12);
                    }
                } else {
                    assert_eq!(coarse.depth[i], 0.0);
                }
            }
        }
    }

    #[test]
    fn depth_mse_matches_masked_loop() {
        let (h, w) = (8, 16);
        let pyr = pyramid_from(3, h, w, 1, 40);
        let level = pyr.finest();
        let mut r = rng(4);
        let pred = leaf(&mut r, &[1, 1, h, w], 0.0, 1.0);

        let mut tape = Tape::<f64>::new();
        let pid = tape.leaf(pred.clone()).unwrap();
        let loss = loss_depth_mse(&mut tape, pid, std::slice::from_ref(&pyr)).unwrap();

        let m = level.valid_count();
        let want: f64 = (0..h * w)
            .filter(|&i| level.mask[i])
            .map(|i| (pred.data[i] - level.depth[i]).powi(2))
            .sum::<f64>()
            / m as f64;
        assert!((tape.item(loss) - want).abs() < 1e-12);

        // Exact hit and constant offset closed forms, all pixels valid.
        let n = h * w;
        let d = vec![0.25; n];
        let mut nrm = vec![0.0; 3 * n];
        for i in 0..n {
            nrm[i] = 1.0;
        }
        let full = build_pyramid(&d, &nrm, &vec![true; n], h, w, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let exact = tape.constant(Tensor::full(&[1, 1, h, w], 0.25)).unwrap();
        let l0 = loss_depth_mse(&mut tape, exact, std::slice::from_ref(&full)).unwrap();
        assert_eq!(tape.item(l0), 0.0);
        let off = tape.constant(Tensor::full(&[1, 1, h, w], 0.35)).unwrap();
        let l1 = loss_depth_mse(&mut tape, off, std::slice::from_ref(&full)).unwrap();
        assert!((tape.item(l1) - 0.01).abs() < 1e-12);

        // An all-invalid mask is an error.
        let none = build_pyramid(&d, &nrm, &vec![false; n], h, w, 1);
        assert!(none.is_err() || {
            let none = none.unwrap();
            let mut tape = Tape::<f64>::new();
            let p = tape.constant(Tensor::full(&[1, 1, h, w], 0.5)).unwrap();
            loss_depth_mse(&mut tape, p, std::slice::from_ref(&none)).is_err()
        });
    }

    #[test]
    fn normal_mse_hits_closed_forms_and_loop() {
        let (h, w) = (4, 8);
        let n = h * w;
        // Ground truth +z everywhere; prediction +x is perpendicular.
        let d = vec![0.5; n];
        let mut nrm = vec![0.0; 3 * n];
        for i in 0..n {
            nrm[2 * n + i] = 1.0;
        }
        let pyr = build_pyramid(&d, &nrm, &vec![true; n], h, w, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut px = Tensor::zeros(&[1, 3, h, w]);
        for i in 0..n {
            px.data[i] = 1.0;
        }
        let pid = tape.constant(px).unwrap();
        let perp = loss_normal_mse(&mut tape, &[pid], std::slice::from_ref(&pyr)).unwrap();
        assert!((tape.item(perp) - FRAC_PI_2 * FRAC_PI_2).abs() < 1e-9);

        let gid = tape
            .constant(Tensor::new(vec![1, 3, h, w], nrm.clone()).unwrap())
            .unwrap();
        let zero = loss_normal_mse(&mut tape, &[gid], std::slice::from_ref(&pyr)).unwrap();
        assert!(tape.item(zero).abs() < 1e-9);

        // Random two-scale stack against an fp64 loop.
        let pyr = pyramid_from(9, 8, 16, 2, 10);
        let mut r = rng(10);
        let preds = pred_stack(&mut r, &pyr, 3, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let ids: Vec<TensorId> =
            preds.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let loss = loss_normal_mse(&mut tape, &ids, std::slice::from_ref(&pyr)).unwrap();
        let mut want = 0.0;
        for (lv, p) in pyr.levels.iter().zip(&preds) {
            let ln = lv.height * lv.width;
            let mut acc = 0.0;
            for i in 0..ln {
                if !lv.mask[i] {
                    continue;
                }
                let mut pv = [p.data[i], p.data[ln + i], p.data[2 * ln + i]];
                let len =
                    (pv[0] * pv[0] + pv[1] * pv[1] + pv[2] * pv[2]).sqrt().max(NORM_FLOOR);
                for v in &mut pv {
                    *v /= len;
                }
                let dot: f64 = (0..3).map(|c| pv[c] * lv.normal[c * ln + i]).sum();
                acc += dot.clamp(-1.0, 1.0).acos().powi(2);
            }
            want += acc / lv.valid_count() as f64;
        }
        assert!((tape.item(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn normal_angle_hits_closed_form_poses() {
        let (h, w) = (4, 8);
        let n = h * w;
        let d = vec![0.5; n];
        let mut nrm = vec![0.0; 3 * n];
        for i in 0..n {
            nrm[2 * n + i] = 1.0;
        }
        let pyr = build_pyramid(&d, &nrm, &vec![true; n], h, w, 1).unwrap();
        let mut tape = Tape::<f64>::new();

        let same = tape
            .constant(Tensor::new(vec![1, 3, h, w], nrm.clone()).unwrap())
            .unwrap();
        let l0 = loss_normal_angle(&mut tape, &[same], std::slice::from_ref(&pyr)).unwrap();
        assert!(tape.item(l0).abs() < 1e-9);

        let mut px = Tensor::zeros(&[1, 3, h, w]);
        for i in 0..n {
            px.data[i] = 1.0;
        }
        let perp = tape.constant(px).unwrap();
        let l1 = loss_normal_angle(&mut tape, &[perp], std::slice::from_ref(&pyr)).unwrap();
        assert!((tape.item(l1) - FRAC_PI_2).abs() < 1e-9);

        let mut anti = Tensor::zeros(&[1, 3, h, w]);
        for i in 0..n {
            anti.data[2 * n + i] = -1.0;
        }
        let aid = tape.constant(anti).unwrap();
        let l2 = loss_normal_angle(&mut tape, &[aid], std::slice::from_ref(&pyr)).unwrap();
        assert!((tape.item(l2) - PI).abs() < 1e-9);

        // Mixed random field against the loop.
        let pyr = pyramid_from(21, 8, 16, 1, 12);
        let mut r = rng(22);
        let pred = leaf(&mut r, &[1, 3, 8, 16], -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let pid = tape.leaf(pred.clone()).unwrap();
        let loss = loss_normal_angle(&mut tape, &[pid], std::slice::from_ref(&pyr)).unwrap();
        let lv = pyr.finest();
        let ln = lv.height * lv.width;
        let mut want = 0.0;
        for i in 0..ln {
            if !lv.mask[i] {
                continue;
            }
            let mut pv = [pred.data[i], pred.data[ln + i], pred.data[2 * ln + i]];
            let len = (pv[0] * pv[0] + pv[1] * pv[1] + pv[2] * pv[2]).sqrt().max(NORM_FLOOR);
            for v in &mut pv {
                *v /= len;
            }
            let g = [lv.normal[i], lv.normal[ln + i], lv.normal[2 * ln + i]];
            let cross = [
                pv[1] * g[2] - pv[2] * g[1],
                pv[2] * g[0] - pv[0] * g[2],
                pv[0] * g[1] - pv[1] * g[0],
            ];
            let s =
                (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            let c: f64 = (0..3).map(|k| pv[k] * g[k]).sum();
            want += s.atan2(c);
        }
        want /= lv.valid_count() as f64;
        assert!((tape.item(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn atan2_and_acos_angles_agree_on_unit_pairs() {
        let mut r = rng(30);
        let mut worst = 0.0f64;
        for _ in 0..100_000 {
            let a = rand_unit(&mut r);
            let b = rand_unit(&mut r);
            let dot: f64 = (0..3).map(|c| a[c] * b[c]).sum();
            let cross = [
                a[1] * b[2] - a[2] * b[1],
                a[2] * b[0] - a[0] * b[2],
                a[0] * b[1] - a[1] * b[0],
            ];
            let s =
                (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
            worst = worst.max((s.atan2(dot) - dot.clamp(-1.0, 1.0).acos()).abs());
        }
        assert!(worst < 1e-9, "worst gap {worst}");
    }

    #[test]
    fn grad_loss_sees_sobel_ramp_response() {
        // Horizontal ramp with slope s: Sobel-x responds with 8s away from
        // the wrap seam, which the mask removes here.
        let (h, w) = (8, 16);
        let n = h * w;
        let s = 0.03;
        let depth: Vec<f64> = (0..n).map(|i| (i % w) as f64 * s).collect();
        let mut nrm = vec![0.0; 3 * n];
        for i in 0..n {
            nrm[i] = 1.0;
        }
        let mut mask = vec![true; n];
        for y in 0..h {
            mask[y * w] = false;
            mask[y * w + w - 1] = false;
        }
        let pyr = build_pyramid(&depth, &nrm, &mask, h, w, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let flat = tape.constant(Tensor::full(&[1, 1, h, w], 0.2)).unwrap();
        let loss = loss_depth_grad(&mut tape, &[flat], std::slice::from_ref(&pyr)).unwrap();
        assert!((tape.item(loss) - 8.0 * s).abs() < 1e-9);

        // Perfect prediction zeroes the term for any map.
        let (d, nrm, m) = random_gt(40, h, w, 6);
        let pyr = build_pyramid(&d, &nrm, &m, h, w, 1).unwrap();
        let mut tape = Tape::<f64>::new();
        let gt = tape
            .constant(Tensor::new(vec![1, 1, h, w], pyr.finest().depth.clone()).unwrap())
            .unwrap();
        let loss = loss_depth_grad(&mut tape, &[gt], std::slice::from_ref(&pyr)).unwrap();
        assert_eq!(tape.item(loss), 0.0);

        // Loop oracle on random maps, including the wrap seam.
        let pyr = pyramid_from(41, h, w, 1, 8);
        let mut r = rng(42);
        let pred = leaf(&mut r, &[1, 1, h, w], 0.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let pid = tape.leaf(pred.clone()).unwrap();
        let loss = loss_depth_grad(&mut tape, &[pid], std::slice::from_ref(&pyr)).unwrap();
        let lv = pyr.finest();
        let eroded = erode3x3_wrap(&lv.mask, h, w);
        let sob = |img: &[f64], y: usize, x: usize, k: &[f64; 9]| -> f64 {
            let mut acc = 0.0;
            for dy in 0..3 {
                for dx in 0..3 {
                    let yy = y as i64 + dy as i64 - 1;
                    if yy < 0 || yy >= h as i64 {
                        continue;
                    }
                    let xx = (x as i64 + dx as i64 - 1).rem_euclid(w as i64) as usize;
                    acc += k[dy * 3 + dx] * img[yy as usize * w + xx];
                }
            }
            acc
        };
        let m: usize = eroded.iter().filter(|v| **v).count();
        let mut want = 0.0;
        for y in 0..h {
            for x in 0..w {
                if !eroded[y * w + x] {
                    continue;
                }
                let gx = (sob(&lv.depth, y, x, &SOBEL_X).abs()
                    - sob(&pred.data, y, x, &SOBEL_X).abs())
                .abs();
                let gy = (sob(&lv.depth, y, x, &SOBEL_Y).abs()
                    - sob(&pred.data, y, x, &SOBEL_Y).abs())
                .abs();
                want += gx + gy;
            }
        }
        want /= m as f64;
        assert!((tape.item(loss) - want).abs() < 1e-9);
    }

    #[test]
    fn perceptual_loss_is_seeded_zero_at_gt_and_normalized() {
        let (h, w) = (8, 16);
        let pyr = pyramid_from(50, h, w, 1, 10);
        let mut r = rng(51);
        let pred = leaf(&mut r, &[1, 1, h, w], 0.0, 1.0);

        let run = |seed: u64, p: &Tensor<f64>| -> f64 {
            let net = PerceptualNet::<f64>::new(seed);
            let mut tape = Tape::<f64>::new();
            let pid = tape.leaf(p.clone()).unwrap();
            let l = loss_perceptual(
                &mut tape,
                pid,
                PerceptualKind::Depth,
                std::slice::from_ref(&pyr),
                &net,
            )
            .unwrap();
            tape.item(l)
        };
        assert_eq!(run(7, &pred), run(7, &pred));
        assert_ne!(run(7, &pred), run(8, &pred));
        assert!(run(7, &pred) > 0.0);

        // Prediction equal to ground truth scores zero for both kinds.
        let lv = pyr.finest();
        let net = PerceptualNet::<f64>::new(7);
        let mut tape = Tape::<f64>::new();
        let d = tape
            .constant(Tensor::new(vec![1, 1, h, w], lv.depth.clone()).unwrap())
            .unwrap();
        let l = loss_perceptual(
            &mut tape,
            d,
            PerceptualKind::Depth,
            std::slice::from_ref(&pyr),
            &net,
        )
        .unwrap();
        assert_eq!(tape.item(l), 0.0);
        let nrm = tape
            .constant(Tensor::new(vec![1, 3, h, w], lv.normal.clone()).unwrap())
            .unwrap();
        let l = loss_perceptual(
            &mut tape,
            nrm,
            PerceptualKind::Normal,
            std::slice::from_ref(&pyr),
            &net,
        )
        .unwrap();
        assert!(tape.item(l) < 1e-18);

        // Normalization: padding the last layer with zero channels doubles
        // C and halves the loss; the feature sum-of-squares is unchanged.
        let base = PerceptualNet::<f64>::new(7);
        let mut wide_layers = Vec::new();
        for (i, (wt, bt)) in base.layers.iter().enumerate() {
            if i + 1 == base.layers.len() {
                let (cout, cin) = (wt.shape[0], wt.shape[1]);
                let mut data = wt.data.clone();
                data.extend(std::iter::repeat(0.0).take(cout * cin * 9));
                let w2 = Tensor::new(vec![2 * cout, cin, 3, 3], data).unwrap();
                wide_layers.push((w2, Tensor::zeros(&[2 * cout])));
            } else {
                wide_layers.push((wt.clone(), bt.clone()));
            }
        }
        let wide = PerceptualNet::from_layers(wide_layers);
        let eval = |net: &PerceptualNet<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let pid = tape.leaf(pred.clone()).unwrap();
            let l = loss_perceptual(
                &mut tape,
                pid,
                PerceptualKind::Depth,
                std::slice::from_ref(&pyr),
                net,
            )
            .unwrap();
            tape.item(l)
        };
        let (lb, lw) = (eval(&base), eval(&wide));
        assert!((lw - lb / 2.0).abs() < 1e-15 * lb.max(1.0), "{lw} vs {}", lb / 2.0);

        // Loop oracle for the normalization itself.
        let mut tape = Tape::<f64>::new();
        let pid = tape.leaf(pred.clone()).unwrap();
        let l = loss_perceptual(
            &mut tape,
            pid,
            PerceptualKind::Depth,
            std::slice::from_ref(&pyr),
            &base,
        )
        .unwrap();
        let mask = mask_const::<f64>(&mut tape, &[lv.mask.clone()], h, w).unwrap();
        let rep = tape.concat(&[pid, pid, pid], 1).unwrap();
        let mp = tape.mul(rep, mask).unwrap();
        let gt = tape
            .constant(Tensor::new(vec![1, 1, h, w], lv.depth.clone()).unwrap())
            .unwrap();
        let grep = tape.concat(&[gt, gt, gt], 1).unwrap();
        let fp = base.features(&mut tape, mp).unwrap();
        let fg = base.features(&mut tape, grep).unwrap();
        let (a, b) = (tape.data(fp).to_vec(), tape.data(fg).to_vec());
        let sum: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        let want = sum / a.len() as f64;
        assert!((tape.item(l) - want).abs() < 1e-12);
    }

    #[test]
    fn invalid_pixels_never_touch_any_term() {
        let (h, w) = (8, 16);
        let (d, nrm, mut mask) = random_gt(60, h, w, 0);
        // Carve a hole block plus scattered singles.
        for y in 2..5 {
            for x in 6..10 {
                mask[y * w + x] = false;
            }
        }
        mask[0] = false;
        mask[7 * w + 15] = false;
        let pyr = build_pyramid(&d, &nrm, &mask, h, w, 2).unwrap();

        let mut r = rng(61);
        let dp = pred_stack(&mut r, &pyr, 1, 0.0, 1.0);
        let np = pred_stack(&mut r, &pyr, 3, -1.0, 1.0);
        let net = PerceptualNet::<f64>::new(7);

        let all = |dp: &[Tensor<f64>], np: &[Tensor<f64>], pyr: &SupervisionPyramid<f64>| {
            let mut tape = Tape::<f64>::new();
            let dids: Vec<TensorId> =
                dp.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let nids: Vec<TensorId> =
                np.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
            let gts = std::slice::from_ref(pyr);
            let v = [
                loss_depth_mse(&mut tape, *dids.last().unwrap(), gts).unwrap(),
                loss_depth_grad(&mut tape, &dids, gts).unwrap(),
                loss_perceptual(&mut tape, *dids.last().unwrap(), PerceptualKind::Depth, gts, &net)
                    .unwrap(),
                loss_normal_mse(&mut tape, &nids, gts).unwrap(),
                loss_normal_angle(&mut tape, &nids, gts).unwrap(),
                loss_perceptual(
                    &mut tape,
                    *nids.last().unwrap(),
                    PerceptualKind::Normal,
                    gts,
                    &net,
                )
                .unwrap(),
            ];
            v.map(|id| tape.item(id))
        };
        let before = all(&dp, &np, &pyr);

        // Perturb predictions on every invalid pixel at every scale.
        let mut dp2 = dp.clone();
        let mut np2 = np.clone();
        for (si, lv) in pyr.levels.iter().enumerate() {
            let ln = lv.height * lv.width;
            for i in 0..ln {
                if lv.mask[i] {
                    continue;
                }
                dp2[si].data[i] += 0.31;
                for c in 0..3 {
                    np2[si].data[c * ln + i] -= 0.17;
                }
            }
        }
        assert_ne!(dp[1].data, dp2[1].data, "test must actually perturb something");
        let after = all(&dp2, &np2, &pyr);
        assert_eq!(before, after);

        // Perturb the raw ground truth on invalid pixels; the pyramid zeroes
        // them so every term is bit-identical too.
        let mut d2 = d.clone();
        let mut n2 = nrm.clone();
        for i in 0..h * w {
            if !mask[i] {
                d2[i] += 3.5;
                n2[i] = 0.9;
            }
        }
        let pyr2 = build_pyramid(&d2, &n2, &mask, h, w, 2).unwrap();
        let again = all(&dp, &np, &pyr2);
        assert_eq!(before, again);
    }

    #[test]
    fn every_term_vanishes_on_perfect_predictions() {
        let (h, w) = (8, 16);
        let pyr = pyramid_from(70, h, w, 2, 9);
        let net = PerceptualNet::<f64>::new(7);
        let mut tape = Tape::<f64>::new();
        let mut dids = Vec::new();
        let mut nids = Vec::new();
        for lv in &pyr.levels {
            let (lh, lw) = (lv.height, lv.width);
            dids.push(
                tape.constant(Tensor::new(vec![1, 1, lh, lw], lv.depth.clone()).unwrap())
                    .unwrap(),
            );
            nids.push(
                tape.constant(Tensor::new(vec![1, 3, lh, lw], lv.normal.clone()).unwrap())
                    .unwrap(),
            );
        }
        let preds = Predictions { depth: dids, normal: nids };
        let out = total_loss(
            &mut tape,
            &preds,
            std::slice::from_ref(&pyr),
            &LossWeights::default(),
            &net,
        )
        .unwrap();
        let bd = out.breakdown;
        for (name, v) in [
            ("depth_mse", bd.depth_mse),
            ("depth_grad", bd.depth_grad),
            ("depth_perceptual", bd.depth_perceptual),
            ("normal_mse", bd.normal_mse),
            ("normal_angle", bd.normal_angle),
            ("normal_perceptual", bd.normal_perceptual),
        ] {
            let v = v.unwrap_or_else(|| panic!("{name} missing"));
            assert!(v.abs() < 1e-9, "{name} = {v}");
        }
        assert!(bd.total.abs() < 1e-9);
    }

    #[test]
    fn breakdown_algebra_and_task_gating_hold() {
        let (h, w) = (8, 16);
        let pyr = pyramid_from(80, h, w, 2, 5);
        let net = PerceptualNet::<f64>::new(7);
        let mut r = rng(81);
        let dp = pred_stack(&mut r, &pyr, 1, 0.0, 1.0);
        let np = pred_stack(&mut r, &pyr, 3, -1.0, 1.0);

        let run = |weights: &LossWeights, with_depth: bool, with_normal: bool| {
            let mut tape = Tape::<f64>::new();
            let dids: Vec<TensorId> = if with_depth {
                dp.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect()
            } else {
                Vec::new()
            };
            let nids: Vec<TensorId> = if with_normal {
                np.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect()
            } else {
                Vec::new()
            };
            let preds = Predictions { depth: dids, normal: nids };
            total_loss(&mut tape, &preds, std::slice::from_ref(&pyr), weights, &net)
                .unwrap()
                .breakdown
        };

        let wts = LossWeights::default();
        let full = run(&wts, true, true);
        let parts = [
            full.depth_mse.unwrap() * wts.depth_mse,
            full.depth_grad.unwrap() * wts.depth_grad,
            full.depth_perceptual.unwrap() * wts.depth_perceptual,
            full.normal_mse.unwrap() * wts.normal_mse,
            full.normal_angle.unwrap() * wts.normal_angle,
            full.normal_perceptual.unwrap() * wts.normal_perceptual,
        ];
        assert!((full.total - parts.iter().sum::<f64>()).abs() < 1e-12);

        // Zeroing one weight removes exactly that contribution.
        let no_grad = run(&LossWeights { depth_grad: 0.0, ..wts }, true, true);
        assert_eq!(no_grad.depth_grad, full.depth_grad);
        assert!((no_grad.total - (full.total - parts[1])).abs() < 1e-12);

        // Task gating: missing predictions drop their terms entirely.
        let donly = run(&wts, true, false);
        assert!(donly.normal_mse.is_none() && donly.normal_angle.is_none());
        assert!(donly.normal_perceptual.is_none());
        assert!(
            (donly.total - (parts[0] + parts[1] + parts[2])).abs() < 1e-12,
            "depth-only total"
        );
        let nonly = run(&wts, false, true);
        assert!(nonly.depth_mse.is_none() && nonly.depth_grad.is_none());
        assert!((nonly.total - (parts[3] + parts[4] + parts[5])).abs() < 1e-12);
    }

    #[test]
    fn loss_terms_pass_grad_check() {
        // No holes: the coarse level must keep eroded-valid pixels so the
        // gradient-matching term reaches every scale.
        let pyr = pyramid_from(90, 8, 16, 2, 0);
        let net = PerceptualNet::<f64>::new(7);
        let mut r = rng(91);
        let dp = pred_stack(&mut r, &pyr, 1, 0.05, 0.95);
        let np = pred_stack(&mut r, &pyr, 3, -0.9, 0.9);
        let to_tensor_err = |e: Error| arg_err("loss", e.to_string());

        let report = grad_check(
            |tape, ids| {
                loss_depth_mse(tape, ids[0], std::slice::from_ref(&pyr))
                    .map_err(to_tensor_err)
            },
            &dp[1..],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "depth mse: {report:?}");

        let report = grad_check(
            |tape, ids| {
                loss_depth_grad(tape, ids, std::slice::from_ref(&pyr)).map_err(to_tensor_err)
            },
            &dp,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "depth grad: {report:?}");

        let report = grad_check(
            |tape, ids| {
                loss_perceptual(tape, ids[0], PerceptualKind::Depth, std::slice::from_ref(&pyr), &net)
                    .map_err(to_tensor_err)
            },
            &dp[1..],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "depth perceptual: {report:?}");

        let report = grad_check(
            |tape, ids| {
                loss_normal_mse(tape, ids, std::slice::from_ref(&pyr)).map_err(to_tensor_err)
            },
            &np,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "normal mse: {report:?}");

        let report = grad_check(
            |tape, ids| {
                loss_normal_angle(tape, ids, std::slice::from_ref(&pyr)).map_err(to_tensor_err)
            },
            &np,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "normal angle: {report:?}");

        let report = grad_check(
            |tape, ids| {
                loss_perceptual(
                    tape,
                    ids[0],
                    PerceptualKind::Normal,
                    std::slice::from_ref(&pyr),
                    &net,
                )
                .map_err(to_tensor_err)
            },
            &np[1..],
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "normal perceptual: {report:?}");

        // The weighted combination, all terms at once.
        let inputs: Vec<Tensor<f64>> = dp.iter().chain(np.iter()).cloned().collect();
        let report = grad_check(
            |tape, ids| {
                let preds = Predictions {
                    depth: ids[..2].to_vec(),
                    normal: ids[2..].to_vec(),
                };
                total_loss(
                    tape,
                    &preds,
                    std::slice::from_ref(&pyr),
                    &LossWeights::default(),
                    &net,
                )
                .map(|t| t.total)
                .map_err(to_tensor_err)
            },
            &inputs,
            1e-6,
        )
        .unwrap();
        assert!(report.passes(1e-4), "total: {report:?}");
    }

    #[test]
    fn batched_losses_pool_valid_pixels_across_samples() {
        // Two samples with different masks: the batched loss must equal the
        // valid-count-weighted pool of the per-sample losses.
        let (h, w) = (4, 8);
        let pyr_a = pyramid_from(100, h, w, 1, 6);
        let pyr_b = pyramid_from(101, h, w, 1, 2);
        let mut r = rng(102);
        let pa = leaf(&mut r, &[1, 1, h, w], 0.0, 1.0);
        let pb = leaf(&mut r, &[1, 1, h, w], 0.0, 1.0);

        let single = |p: &Tensor<f64>, pyr: &SupervisionPyramid<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let id = tape.leaf(p.clone()).unwrap();
            let l = loss_depth_mse(&mut tape, id, std::slice::from_ref(pyr)).unwrap();
            tape.item(l)
        };
        let (la, lb) = (single(&pa, &pyr_a), single(&pb, &pyr_b));
        let (ma, mb) = (
            pyr_a.finest().valid_count() as f64,
            pyr_b.finest().valid_count() as f64,
        );

        let mut tape = Tape::<f64>::new();
        let mut data = pa.data.clone();
        data.extend_from_slice(&pb.data);
        let both = tape
            .leaf(Tensor::new(vec![2, 1, h, w], data).unwrap().with_grad())
            .unwrap();
        let l = loss_depth_mse(&mut tape, both, &[pyr_a.clone(), pyr_b.clone()]).unwrap();
        let want = (la * ma + lb * mb) / (ma + mb);
        assert!((tape.item(l) - want).abs() < 1e-12);
    }
}
