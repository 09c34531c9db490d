//! Panoramic transformer blocks.
//!
//! The attention sub-block is deformable: every token predicts, per head, a
//! set of fractional-pixel offsets (the "flow") away from a precomputed
//! spherical sampling grid, plus a softmax weight per sample. Values are
//! gathered by wrap-aware bilinear sampling, so the receptive field follows
//! the sphere rather than the distorted equirectangular lattice. The
//! feed-forward sub-block is a pointwise expansion with a depthwise 3x3
//! (longitude-wrapped) convolution in the middle.
//!
//! Both sub-blocks are pre-normalized residual maps: `f + body(norm(f))`.
//! All parameters arrive as tape ids so the same code serves training,
//! inference and gradient checking.

use crate::geometry::SamplingGrid;
use crate::tensor::{
    arg_err, Conv2dOpts, NormMode, Scalar, Tape, Tensor, TensorError, TensorId, NORM_EPS,
};

/// Parameters of the deformable spherical attention sub-block.
///
/// With C channels, M heads and K grid samples: `flow_w` is `[M*K*2, C, 1, 1]`
/// (channel `(m*K + k)*2 + a` is the u offset for a = 0, v for a = 1),
/// `attn_w` is `[M*K, C, 1, 1]`, `value_w` and `out_w` are `[C, C, 1, 1]`.
/// Head m reads value channels `m*C/M..(m+1)*C/M`, which makes `value_w` the
/// stack of the per-head value projections and `out_w` the sum of per-head
/// output projections.
#[derive(Debug, Clone, Copy)]
pub struct PanoAttentionParams {
    pub heads: usize,
    pub norm_gain: TensorId,
    pub norm_shift: TensorId,
    pub flow_w: TensorId,
    pub flow_b: TensorId,
    pub attn_w: TensorId,
    pub attn_b: TensorId,
    pub value_w: TensorId,
    pub value_b: TensorId,
    pub out_w: TensorId,
    pub out_b: TensorId,
}

/// Parameters of the locally-optimized feed-forward sub-block
/// (expansion ratio 2, depthwise 3x3 in the expanded width).
#[derive(Debug, Clone, Copy)]
pub struct LocalFfnParams {
    pub norm_gain: TensorId,
    pub norm_shift: TensorId,
    pub expand_w: TensorId,
    pub expand_b: TensorId,
    pub dw_w: TensorId,
    pub dw_b: TensorId,
    pub contract_w: TensorId,
    pub contract_b: TensorId,
}

#[derive(Debug, Clone, Copy)]
pub struct PanoBlockParams {
    pub attn: PanoAttentionParams,
    pub ffn: LocalFfnParams,
}

/// Intermediate tape ids of one attention evaluation, for inspection.
pub struct AttentionTrace {
    pub output: TensorId,
    /// softmax weights, `[B, M, K, H, W]`
    pub attn: TensorId,
    /// effective sampling coordinates, `[B, M, K, 2, H, W]`
    pub coords: TensorId,
}

/// Insert a sampling grid into a tape as a constant `[1, 1, K, 2, H, W]`
/// coordinate tensor, broadcastable against per-head flow offsets.
pub fn grid_leaf<S: Scalar>(
    tape: &mut Tape<S>,
    grid: &SamplingGrid,
) -> Result<TensorId, TensorError> {
    let (h, w) = (grid.layout.height, grid.layout.width);
    let data: Vec<S> = grid.coords.iter().map(|&v| S::from_f64(v)).collect();
    tape.constant(Tensor::new(vec![1, 1, grid.k(), 2, h, w], data)?)
}

pub fn pano_attention<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    grid: TensorId,
    p: &PanoAttentionParams,
) -> Result<TensorId, TensorError> {
    Ok(pano_attention_traced(tape, x, grid, p)?.output)
}

pub fn pano_attention_traced<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    grid: TensorId,
    p: &PanoAttentionParams,
) -> Result<AttentionTrace, TensorError> {
    let xs = tape.shape(x).to_vec();
    let gs = tape.shape(grid).to_vec();
    if xs.len() != 4 {
        return Err(arg_err("pano_attention", format!("feature must be rank 4, got {xs:?}")));
    }
    if gs.len() != 6 || gs[0] != 1 || gs[1] != 1 || gs[3] != 2 {
        return Err(arg_err("pano_attention", format!("grid must be [1,1,K,2,H,W], got {gs:?}")));
    }
    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let k = gs[2];
    if gs[4] != h || gs[5] != w {
        return Err(arg_err(
            "pano_attention",
            format!("grid is for {}x{}, feature is {h}x{w}", gs[4], gs[5]),
        ));
    }
    let m = p.heads;
    if m == 0 || c % m != 0 {
        return Err(arg_err("pano_attention", format!("{m} heads do not divide {c} channels")));
    }
    let ch = c / m;

    let xn = tape.normalize_layer(x, NormMode::Layer, p.norm_gain, p.norm_shift, NORM_EPS)?;
    let pw = Conv2dOpts::pointwise();

    let flow = tape.conv2d(xn, p.flow_w, p.flow_b, pw)?;
    let flow = tape.reshape(flow, &[b, m, k, 2, h, w])?;
    let coords = tape.add(flow, grid)?;

    let logits = tape.conv2d(xn, p.attn_w, p.attn_b, pw)?;
    let logits = tape.reshape(logits, &[b, m, k, h, w])?;
    let attn = tape.softmax(logits, 2)?;

    let value = tape.conv2d(xn, p.value_w, p.value_b, pw)?;

    let mut head_outs = Vec::with_capacity(m);
    for mi in 0..m {
        let vm = tape.narrow(value, 1, mi * ch, ch)?;
        let cm = tape.narrow(coords, 1, mi, 1)?;
        let cm = tape.reshape(cm, &[b, k, 2, h, w])?;
        let sampled = tape.sample_bilinear(vm, cm)?; // [B, ch, K, H, W]
        let am = tape.narrow(attn, 1, mi, 1)?; // [B, 1, K, H, W]
        let weighted = tape.mul(sampled, am)?;
        head_outs.push(tape.sum_axis(weighted, 2, false)?); // [B, ch, H, W]
    }
    let merged = if m == 1 { head_outs[0] } else { tape.concat(&head_outs, 1)? };
    let proj = tape.conv2d(merged, p.out_w, p.out_b, pw)?;
    let output = tape.add(x, proj)?;
    Ok(AttentionTrace { output, attn, coords })
}

pub fn local_ffn<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    p: &LocalFfnParams,
) -> Result<TensorId, TensorError> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(arg_err("local_ffn", format!("feature must be rank 4, got {xs:?}")));
    }
    let c2 = 2 * xs[1];
    let xn = tape.normalize_layer(x, NormMode::Layer, p.norm_gain, p.norm_shift, NORM_EPS)?;
    let hid = tape.conv2d(xn, p.expand_w, p.expand_b, Conv2dOpts::pointwise())?;
    let hid = tape.gelu(hid)?;
    let dw = Conv2dOpts { groups: c2, ..Conv2dOpts::same_wrapped() };
    let hid = tape.conv2d(hid, p.dw_w, p.dw_b, dw)?;
    let hid = tape.conv2d(hid, p.contract_w, p.contract_b, Conv2dOpts::pointwise())?;
    tape.add(x, hid)
}

/// One full block: pre-norm deformable attention, then pre-norm local
/// feed-forward, each with its residual. Shape preserving.
pub fn pano_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    grid: TensorId,
    p: &PanoBlockParams,
) -> Result<TensorId, TensorError> {
    let a = pano_attention(tape, x, grid, &p.attn)?;
    local_ffn(tape, a, &p.ffn)
}
