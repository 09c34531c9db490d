//! Finite-difference verification suites for the whole differentiable stack.
//!
//! Three scopes: `op` probes every tape operation in isolation, `block`
//! covers the transformer sub-blocks, the fusion module and each loss term,
//! and `network` runs the end-to-end model and probes sampled parameters.
//! Everything runs at `f64` against central differences with the default
//! step and the shared [`TOLERANCE`].
//!
//! Inputs are drawn so that every probe keeps a safety margin from the
//! genuine non-differentiable points of the op under test (kinks of `relu`
//! and `abs`, clamp edges, bilinear cell borders, the zero-flow sampling
//! positions). A red check therefore means a wrong derivative, not an
//! unlucky probe. `sigmoid_bad_grad` stays in the list as a negative
//! control: its check must come out red or the suite itself is broken.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{
    grid_leaf, local_ffn, pano_attention, pano_block, LocalFfnParams, PanoAttentionParams,
    PanoBlockParams,
};
use crate::geometry::{build_sampling_grid, ErpLayout};
use crate::losses::{
    build_pyramid, loss_depth_grad, loss_depth_mse, loss_normal_angle, loss_normal_mse,
    loss_perceptual, PerceptualKind, PerceptualNet, SupervisionPyramid,
};
use crate::net::{forward_with_ids, fuse_level, GridSet, NetworkConfig, NetworkState};
use crate::tensor::gradcheck::{grad_check, grad_check_at, GradCheckReport, DEFAULT_STEP};
use crate::tensor::{arg_err, Conv2dOpts, NormMode, Tape, Tensor, TensorError, TensorId, NORM_EPS};
use crate::Error;

/// Every check must keep its worst relative error below this.
pub const TOLERANCE: f64 = 1e-4;


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Op,
    Block,
    Network,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "op" => Some(Scope::Op),
            "block" => Some(Scope::Block),
            "network" => Some(Scope::Network),
            "all" => Some(Scope::All),
            _ => None,
        }
    }
}

/// One finished check. `expect_fail` marks the deliberately broken negative
/// control, whose error must land above the tolerance.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub probes: usize,
    pub expect_fail: bool,
}

impl CheckOutcome {
    pub fn good(&self) -> bool {
        (self.max_rel_err < TOLERANCE) != self.expect_fail
    }
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.good() { "ok  " } else { "FAIL" };
        let note = if self.expect_fail { " (negative control, must exceed tolerance)" } else { "" };
        write!(
            f,
            "{verdict} {:<24} max rel err {:.3e} over {} probes{note}",
            self.name, self.max_rel_err, self.probes
        )
    }
}

/// Run the selected scope(s). Outcomes come back in a fixed order; the
/// caller decides how to print them.
pub fn run(scope: Scope) -> crate::Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    if matches!(scope, Scope::Op | Scope::All) {
        op_suite(&mut out)?;
    }
    if matches!(scope, Scope::Block | Scope::All) {
        block_suite(&mut out)?;
    }
    if matches!(scope, Scope::Network | Scope::All) {
        out.push(network_check()?);
    }
    Ok(out)
}

fn rng_for(salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0xC0FFEE ^ salt)
}

fn sign(r: &mut ChaCha8Rng) -> f64 {
    if r.gen::<bool>() {
        1.0
    } else {
        -1.0
    }
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape").with_grad()
}

/// Magnitude in `[lo, hi)` with random sign: margin from kinks at zero.
fn signed(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(lo..hi) * sign(r)).collect();
    Tensor::new(shape.to_vec(), data).expect("static shape").with_grad()
}

/// Weighted sum with strictly positive, non-constant weights. A plain sum
/// would hide direction-dependent bugs: softmax rows, for one, have exactly
/// zero gradient under a uniform cotangent.
fn weighted_scalar_at(
    tape: &mut Tape<f64>,
    x: TensorId,
    phase: f64,
) -> Result<TensorId, TensorError> {
    let shape = tape.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| 1.5 + (1.7 * i as f64 + 0.3 + phase).sin()).collect();
    let wid = tape.constant(Tensor::new(shape, w)?)?;
    let p = tape.mul(x, wid)?;
    tape.sum_all(p)
}

fn weighted_scalar(tape: &mut Tape<f64>, x: TensorId) -> Result<TensorId, TensorError> {
    weighted_scalar_at(tape, x, 0.0)
}

fn outcome(name: &'static str, report: &GradCheckReport, expect_fail: bool) -> CheckOutcome {
    CheckOutcome { name, max_rel_err: report.max_rel_err, probes: report.probes, expect_fail }
}

/// Probe every element of every grad-requiring input of `f`.
fn run_check<F>(name: &'static str, inputs: &[Tensor<f64>], f: F) -> crate::Result<CheckOutcome>
where
    F: Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let report = grad_check(
        |tape, ids| {
            let y = f(tape, ids)?;
            weighted_scalar(tape, y)
        },
        inputs,
        DEFAULT_STEP,
    )?;
    Ok(outcome(name, &report, false))
}

fn op_suite(out: &mut Vec<CheckOutcome>) -> crate::Result<()> {
    let r = &mut rng_for(1);
    let s = &[2usize, 3, 4][..];

    // smooth elementwise maps take arbitrary values
    out.push(run_check("gelu", &[uniform(r, s, -2.0, 2.0)], |t, i| t.gelu(i[0]))?);
    out.push(run_check("sigmoid", &[uniform(r, s, -2.0, 2.0)], |t, i| t.sigmoid(i[0]))?);
    out.push(run_check("tanh", &[uniform(r, s, -2.0, 2.0)], |t, i| t.tanh(i[0]))?);
    out.push(run_check("neg", &[uniform(r, s, -1.0, 1.0)], |t, i| t.neg(i[0]))?);
    out.push(run_check("add_scalar", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.add_scalar(i[0], 0.37)
    })?);
    out.push(run_check("mul_scalar", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.mul_scalar(i[0], -1.3)
    })?);

    // kinked or domain-limited maps get margins
    out.push(run_check("relu", &[signed(r, s, 0.2, 1.0)], |t, i| t.relu(i[0]))?);
    out.push(run_check("abs", &[signed(r, s, 0.2, 1.0)], |t, i| t.abs(i[0]))?);
    out.push(run_check("sqrt", &[uniform(r, s, 0.3, 2.0)], |t, i| t.sqrt(i[0]))?);
    out.push(run_check("log10", &[uniform(r, s, 0.3, 3.0)], |t, i| t.log10(i[0]))?);
    out.push(run_check("acos_clamped", &[uniform(r, s, -0.8, 0.8)], |t, i| {
        t.acos_clamped(i[0])
    })?);
    let clamp_in: Vec<f64> = (0..24)
        .map(|_| match r.gen_range(0..3) {
            0 => r.gen_range(-0.65..0.65),
            1 => r.gen_range(0.95..1.5),
            _ => r.gen_range(-1.5..-0.95),
        })
        .collect();
    let clamp_x = Tensor::new(s.to_vec(), clamp_in)?.with_grad();
    out.push(run_check("clamp", &[clamp_x], |t, i| t.clamp(i[0], -0.8, 0.8))?);

    out.push(run_check("add", &[uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |t, i| {
        t.add(i[0], i[1])
    })?);
    out.push(run_check("sub", &[uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |t, i| {
        t.sub(i[0], i[1])
    })?);
    out.push(run_check("mul", &[uniform(r, s, -1.0, 1.0), uniform(r, s, -1.0, 1.0)], |t, i| {
        t.mul(i[0], i[1])
    })?);
    out.push(run_check("div", &[uniform(r, s, -2.0, 2.0), signed(r, s, 0.3, 1.5)], |t, i| {
        t.div(i[0], i[1])
    })?);
    // x > 0 keeps atan2 away from both the origin and the branch cut
    out.push(run_check("atan2", &[signed(r, s, 0.2, 1.0), uniform(r, s, 0.3, 1.0)], |t, i| {
        t.atan2(i[0], i[1])
    })?);

    out.push(run_check("sum_all", &[uniform(r, s, -1.0, 1.0)], |t, i| t.sum_all(i[0]))?);
    out.push(run_check("mean_all", &[uniform(r, s, -1.0, 1.0)], |t, i| t.mean_all(i[0]))?);
    out.push(run_check("sum_axis_keep", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.sum_axis(i[0], 1, true)
    })?);
    out.push(run_check("sum_axis_drop", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.sum_axis(i[0], 2, false)
    })?);
    out.push(run_check("mean_axes", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.mean_axes(i[0], &[0, 2])
    })?);
    out.push(run_check("softmax", &[uniform(r, &[2, 5], -1.0, 1.0)], |t, i| {
        t.softmax(i[0], 1)
    })?);
    out.push(run_check("vec_norm", &[signed(r, &[2, 3, 5], 0.2, 1.0)], |t, i| {
        t.vec_norm(i[0], 1)
    })?);

    out.push(run_check("reshape", &[uniform(r, s, -1.0, 1.0)], |t, i| {
        t.reshape(i[0], &[4, 6])
    })?);
    out.push(run_check("narrow", &[uniform(r, &[2, 5, 4], -1.0, 1.0)], |t, i| {
        t.narrow(i[0], 1, 1, 3)
    })?);
    out.push(run_check(
        "concat",
        &[uniform(r, &[1, 2, 3, 4], -1.0, 1.0), uniform(r, &[1, 3, 3, 4], -1.0, 1.0)],
        |t, i| t.concat(&[i[0], i[1]], 1),
    )?);

    out.push(run_check(
        "linear",
        &[uniform(r, &[3, 5], -1.0, 1.0), uniform(r, &[4, 5], -0.5, 0.5), uniform(r, &[4], -0.2, 0.2)],
        |t, i| t.linear(i[0], i[1], i[2]),
    )?);
    out.push(run_check(
        "conv2d",
        &[
            uniform(r, &[1, 3, 4, 6], -1.0, 1.0),
            uniform(r, &[4, 3, 3, 3], -0.5, 0.5),
            uniform(r, &[4], -0.2, 0.2),
        ],
        |t, i| t.conv2d(i[0], i[1], i[2], Conv2dOpts::same_wrapped()),
    )?);
    out.push(run_check(
        "conv2d_depthwise",
        &[
            uniform(r, &[1, 4, 4, 6], -1.0, 1.0),
            uniform(r, &[4, 1, 3, 3], -0.5, 0.5),
            uniform(r, &[4], -0.2, 0.2),
        ],
        |t, i| t.conv2d(i[0], i[1], i[2], Conv2dOpts { stride: 2, pad: 1, wrap_w: true, groups: 4 }),
    )?);

    // strictly separated values keep every pooling argmax stable under probes
    let mut order: Vec<usize> = (0..48).collect();
    order.shuffle(r);
    let pool_in: Vec<f64> = order.iter().map(|&k| k as f64 * 0.11 - 2.0).collect();
    let pool_x = Tensor::new(vec![1, 2, 4, 6], pool_in)?.with_grad();
    out.push(run_check("maxpool2", &[pool_x], |t, i| t.maxpool2(i[0]))?);

    // resize is linear in its input, so no probe can cross a cell border
    out.push(run_check("bilinear_resize_up", &[uniform(r, &[1, 2, 3, 4], -1.0, 1.0)], |t, i| {
        t.bilinear_resize(i[0], 5, 8, true)
    })?);
    out.push(run_check("bilinear_resize_down", &[uniform(r, &[1, 2, 6, 8], -1.0, 1.0)], |t, i| {
        t.bilinear_resize(i[0], 3, 4, false)
    })?);

    // sampling coordinates stay 0.3 away from every integer lattice line
    let mut coord_data = Vec::with_capacity(2 * 2 * 2 * 3);
    for _ in 0..2 {
        for _ in 0..6 {
            coord_data.push(r.gen_range(0..8) as f64 + r.gen_range(0.3..0.7));
        }
        for _ in 0..6 {
            coord_data.push(r.gen_range(0..2) as f64 + r.gen_range(0.3..0.7));
        }
    }
    let coords = Tensor::new(vec![1, 2, 2, 2, 3], coord_data)?.with_grad();
    out.push(run_check(
        "sample_bilinear",
        &[uniform(r, &[1, 2, 3, 8], -1.0, 1.0), coords],
        |t, i| t.sample_bilinear(i[0], i[1]),
    )?);

    for (name, mode) in [
        ("normalize_batch", NormMode::Batch),
        ("normalize_layer", NormMode::Layer),
        ("normalize_instance", NormMode::Instance),
    ] {
        out.push(run_check(
            name,
            &[
                uniform(r, &[2, 3, 4, 6], -1.0, 1.0),
                uniform(r, &[3], 0.5, 1.5),
                uniform(r, &[3], -0.5, 0.5),
            ],
            move |t, i| t.normalize_layer(i[0], mode, i[1], i[2], NORM_EPS),
        )?);
    }
    out.push(run_check(
        "switchable_norm",
        &[
            uniform(r, &[2, 3, 4, 6], -1.0, 1.0),
            uniform(r, &[3], -0.5, 0.5),
            uniform(r, &[3], -0.5, 0.5),
            uniform(r, &[3], 0.5, 1.5),
            uniform(r, &[3], -0.5, 0.5),
        ],
        |t, i| t.switchable_norm(i[0], i[1], i[2], i[3], i[4], NORM_EPS),
    )?);

    // negative control: a wrong backward must trip the checker
    let report = grad_check(
        |t, i| {
            let y = t.sigmoid_bad_grad(i[0])?;
            weighted_scalar(t, y)
        },
        &[uniform(r, s, -2.0, 2.0)],
        DEFAULT_STEP,
    )?;
    out.push(outcome("sigmoid_bad_grad", &report, true));
    Ok(())
}

// ---- block scope ----

const BLOCK_C: usize = 4;
const BLOCK_HEADS: usize = 2;
const BLOCK_K_SIDE: usize = 3;
const BLOCK_H: usize = 4;
const BLOCK_W: usize = 8;

/// Tensors for one attention sub-block, feature first. Flow biases sit well
/// off zero so no sampling position lands on a bilinear cell border.
fn attention_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let (c, m, k) = (BLOCK_C, BLOCK_HEADS, BLOCK_K_SIDE * BLOCK_K_SIDE);
    vec![
        uniform(r, &[1, c, BLOCK_H, BLOCK_W], -1.0, 1.0),
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
        uniform(r, &[m * k * 2, c, 1, 1], -0.05, 0.05),
        signed(r, &[m * k * 2], 0.08, 0.3),
        uniform(r, &[m * k, c, 1, 1], -0.3, 0.3),
        uniform(r, &[m * k], -0.2, 0.2),
        uniform(r, &[c, c, 1, 1], -0.4, 0.4),
        uniform(r, &[c], -0.2, 0.2),
        uniform(r, &[c, c, 1, 1], -0.3, 0.3),
        uniform(r, &[c], -0.2, 0.2),
    ]
}

fn attention_params(ids: &[TensorId], off: usize) -> PanoAttentionParams {
    PanoAttentionParams {
        heads: BLOCK_HEADS,
        norm_gain: ids[off],
        norm_shift: ids[off + 1],
        flow_w: ids[off + 2],
        flow_b: ids[off + 3],
        attn_w: ids[off + 4],
        attn_b: ids[off + 5],
        value_w: ids[off + 6],
        value_b: ids[off + 7],
        out_w: ids[off + 8],
        out_b: ids[off + 9],
    }
}

fn ffn_inputs(r: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let c = BLOCK_C;
    vec![
        uniform(r, &[c], 0.5, 1.5),
        uniform(r, &[c], -0.5, 0.5),
        uniform(r, &[2 * c, c, 1, 1], -0.4, 0.4),
        uniform(r, &[2 * c], -0.2, 0.2),
        uniform(r, &[2 * c, 1, 3, 3], -0.3, 0.3),
        uniform(r, &[2 * c], -0.2, 0.2),
        uniform(r, &[c, 2 * c, 1, 1], -0.3, 0.3),
        uniform(r, &[c], -0.2, 0.2),
    ]
}

fn ffn_params(ids: &[TensorId], off: usize) -> LocalFfnParams {
    LocalFfnParams {
        norm_gain: ids[off],
        norm_shift: ids[off + 1],
        expand_w: ids[off + 2],
        expand_b: ids[off + 3],
        dw_w: ids[off + 4],
        dw_b: ids[off + 5],
        contract_w: ids[off + 6],
        contract_b: ids[off + 7],
    }
}

fn block_grid() -> crate::Result<crate::geometry::SamplingGrid> {
    let layout = ErpLayout::new(BLOCK_H, BLOCK_W).map_err(|e| Error::invalid(e.to_string()))?;
    build_sampling_grid(layout, BLOCK_K_SIDE, layout.pixel_pitch())
        .map_err(|e| Error::invalid(e.to_string()))
}

/// Random unit-normal ground truth plus an all-valid mask at `h` x `w`.
fn loss_pyramids(
    r: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    scales: usize,
) -> crate::Result<Vec<SupervisionPyramid<f64>>> {
    let n = h * w;
    let depth: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..0.9)).collect();
    let mut normal = vec![0.0; 3 * n];
    for i in 0..n {
        let v = [
            r.gen_range(0.2..1.0) * sign(r),
            r.gen_range(0.2..1.0) * sign(r),
            r.gen_range(0.2..1.0) * sign(r),
        ];
        let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for a in 0..3 {
            normal[a * n + i] = v[a] / len;
        }
    }
    let mask = vec![true; n];
    Ok(vec![build_pyramid(&depth, &normal, &mask, h, w, scales)?])
}

fn block_suite(out: &mut Vec<CheckOutcome>) -> crate::Result<()> {
    let r = &mut rng_for(2);

    let grid = block_grid()?;
    out.push(run_check("pano_attention", &attention_inputs(r), move |t, i| {
        let g = grid_leaf(t, &grid)?;
        pano_attention(t, i[0], g, &attention_params(i, 1))
    })?);

    let mut ffn_in = vec![uniform(r, &[1, BLOCK_C, BLOCK_H, BLOCK_W], -1.0, 1.0)];
    ffn_in.extend(ffn_inputs(r));
    out.push(run_check("local_ffn", &ffn_in, |t, i| local_ffn(t, i[0], &ffn_params(i, 1)))?);

    let grid = block_grid()?;
    let mut block_in = attention_inputs(r);
    block_in.extend(ffn_inputs(r));
    out.push(run_check("pano_block", &block_in, move |t, i| {
        let g = grid_leaf(t, &grid)?;
        let p = PanoBlockParams { attn: attention_params(i, 1), ffn: ffn_params(i, 11) };
        pano_block(t, i[0], g, &p)
    })?);

    // fusion: two features plus three conv+norm branches, all probed
    let c = BLOCK_C;
    let mut fuse_in = vec![
        uniform(r, &[1, c, BLOCK_H, BLOCK_W], -1.0, 1.0),
        uniform(r, &[1, c, BLOCK_H, BLOCK_W], -1.0, 1.0),
    ];
    for _ in 0..3 {
        fuse_in.push(uniform(r, &[c, 2 * c, 1, 1], -0.3, 0.3));
        fuse_in.push(uniform(r, &[c], -0.2, 0.2));
        fuse_in.push(uniform(r, &[3], -0.5, 0.5));
        fuse_in.push(uniform(r, &[3], -0.5, 0.5));
        fuse_in.push(uniform(r, &[c], 0.5, 1.5));
        fuse_in.push(uniform(r, &[c], -0.5, 0.5));
    }
    out.push(run_check("fusion", &fuse_in, |t, i| {
        let mut map = BTreeMap::new();
        for (pi, part) in ["depth", "normal", "fuse"].iter().enumerate() {
            let b = 2 + pi * 6;
            map.insert(format!("f.{part}.conv.w"), i[b]);
            map.insert(format!("f.{part}.conv.b"), i[b + 1]);
            map.insert(format!("f.{part}.sn.mean_logits"), i[b + 2]);
            map.insert(format!("f.{part}.sn.var_logits"), i[b + 3]);
            map.insert(format!("f.{part}.sn.gain"), i[b + 4]);
            map.insert(format!("f.{part}.sn.shift"), i[b + 5]);
        }
        let o = fuse_level(t, i[0], i[1], &map, "f").map_err(|e| arg_err("fusion", e.to_string()))?;
        let a = weighted_scalar_at(t, o.depth, 0.0)?;
        let b = weighted_scalar_at(t, o.normal, 0.7)?;
        let f = weighted_scalar_at(t, o.fuse, 1.4)?;
        let ab = t.add(a, b)?;
        t.add(ab, f)
    })?);

    // loss terms at 8x16 with a two-level pyramid
    let (h, w) = (8usize, 16usize);
    let to_op = |e: Error| arg_err("loss", e.to_string());

    let pyr = loss_pyramids(r, h, w, 2)?;
    out.push(run_check("loss_depth_mse", &[uniform(r, &[1, 1, h, w], 0.1, 0.9)], move |t, i| {
        loss_depth_mse(t, i[0], &pyr).map_err(to_op)
    })?);

    let pyr = loss_pyramids(r, h, w, 2)?;
    let d_preds =
        [uniform(r, &[1, 1, h / 2, w / 2], 0.1, 0.9), uniform(r, &[1, 1, h, w], 0.1, 0.9)];
    out.push(run_check("loss_depth_grad", &d_preds, move |t, i| {
        loss_depth_grad(t, &[i[0], i[1]], &pyr).map_err(to_op)
    })?);

    let pyr = loss_pyramids(r, h, w, 2)?;
    let pnet = PerceptualNet::<f64>::new(7);
    out.push(run_check(
        "loss_depth_perceptual",
        &[uniform(r, &[1, 1, h, w], 0.1, 0.9)],
        move |t, i| loss_perceptual(t, i[0], PerceptualKind::Depth, &pyr, &pnet).map_err(to_op),
    )?);

    let pyr = loss_pyramids(r, h, w, 2)?;
    let n_preds =
        [signed(r, &[1, 3, h / 2, w / 2], 0.2, 0.9), signed(r, &[1, 3, h, w], 0.2, 0.9)];
    out.push(run_check("loss_normal_mse", &n_preds, move |t, i| {
        loss_normal_mse(t, &[i[0], i[1]], &pyr).map_err(to_op)
    })?);

    let pyr = loss_pyramids(r, h, w, 2)?;
    let n_preds =
        [signed(r, &[1, 3, h / 2, w / 2], 0.2, 0.9), signed(r, &[1, 3, h, w], 0.2, 0.9)];
    out.push(run_check("loss_normal_angle", &n_preds, move |t, i| {
        loss_normal_angle(t, &[i[0], i[1]], &pyr).map_err(to_op)
    })?);

    let pyr = loss_pyramids(r, h, w, 2)?;
    let pnet = PerceptualNet::<f64>::new(7);
    out.push(run_check(
        "loss_normal_perceptual",
        &[signed(r, &[1, 3, h, w], 0.2, 0.9)],
        move |t, i| loss_perceptual(t, i[0], PerceptualKind::Normal, &pyr, &pnet).map_err(to_op),
    )?);
    Ok(())
}

// ---- network scope ----

/// End-to-end check on a narrow model at the smallest legal resolution,
/// probing a sample of parameters plus two image pixels. Flow biases and the
/// zero-initialized projections move off their init point first: zero flow
/// would park every sampling position exactly on a bilinear cell corner.
fn network_check() -> crate::Result<CheckOutcome> {
    let cfg = NetworkConfig { base_channels: 8, ..NetworkConfig::desk() };
    let mut state = NetworkState::<f64>::init(&cfg, 33)?;
    let r = &mut rng_for(3);
    for (k, t) in state.params.iter_mut() {
        if k.contains(".flow.b") {
            for v in &mut t.data {
                *v = r.gen_range(0.08..0.3) * sign(r);
            }
        }
        if (k.starts_with("fuse.") && (k.ends_with(".conv.w") || k.ends_with(".conv.b")))
            || k.ends_with("attn.out.w")
            || k.ends_with("ffn.contract.w")
        {
            for v in &mut t.data {
                *v = r.gen_range(-0.1..0.1);
            }
        }
    }
    let grids = GridSet::for_config(&cfg)?;
    let names: Vec<String> = state.params.keys().cloned().collect();
    // rgb margin from [0, 1] keeps the probe steps inside the valid range
    let mut inputs = vec![uniform(r, &[1, 3, cfg.height, cfg.width], 0.01, 0.99)];
    for n in &names {
        inputs.push(state.params[n].clone());
    }
    let mut probes: Vec<(usize, usize)> = vec![(0, 101), (0, 5012)];
    let mut picked = BTreeSet::new();
    while picked.len() < 24 {
        let pi = r.gen_range(0..names.len());
        if picked.insert(pi) {
            let n = inputs[pi + 1].numel();
            probes.push((pi + 1, r.gen_range(0..n)));
        }
    }
    // Reference predictions at the unperturbed point. The raw weighted sum
    // over ~1e5 pixels has magnitude ~1e4, which parks the difference
    // quotient of a weakly-coupled parameter on the f64 roundoff floor.
    // Subtracting the references (constants, so no gradient change) keeps
    // every partial sum O(step * grad) instead.
    let refs: Vec<Tensor<f64>> = {
        let mut tape = Tape::new();
        let rgb0 = tape.constant(inputs[0].clone())?;
        let mut map = BTreeMap::new();
        for (n, t) in names.iter().zip(&inputs[1..]) {
            map.insert(n.clone(), tape.constant(t.clone())?);
        }
        let preds = forward_with_ids(&mut tape, rgb0, &map, &cfg, &grids)?;
        preds.depth.iter().chain(preds.normal.iter()).map(|&p| tape.detach(p)).collect()
    };
    let report = grad_check_at(
        move |tape, ids| {
            let map: BTreeMap<String, TensorId> =
                names.iter().cloned().zip(ids[1..].iter().copied()).collect();
            let preds = forward_with_ids(tape, ids[0], &map, &cfg, &grids)
                .map_err(|e| arg_err("network", e.to_string()))?;
            let mut total = None;
            for (si, &p) in preds.depth.iter().chain(preds.normal.iter()).enumerate() {
                let c = tape.constant(refs[si].clone())?;
                let d = tape.sub(p, c)?;
                let s = weighted_scalar_at(tape, d, 0.71 * si as f64)?;
                total = Some(match total {
                    None => s,
                    Some(t) => tape.add(t, s)?,
                });
            }
            Ok(total.expect("both tasks predict"))
        },
        &inputs,
        DEFAULT_STEP,
        &probes,
    )?;
    Ok(outcome("network", &report, false))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scope_strings_parse_and_reject_garbage() {
        assert_eq!(Scope::parse("op"), Some(Scope::Op));
        assert_eq!(Scope::parse("block"), Some(Scope::Block));
        assert_eq!(Scope::parse("network"), Some(Scope::Network));
        assert_eq!(Scope::parse("all"), Some(Scope::All));
        assert_eq!(Scope::parse("ops"), None);
    }

    #[test]
    fn op_scope_is_clean_and_flags_the_negative_control() {
        let outcomes = run(Scope::Op).unwrap();
        assert!(outcomes.len() >= 30, "expected full op coverage, got {}", outcomes.len());
        let controls: Vec<_> = outcomes.iter().filter(|o| o.expect_fail).collect();
        assert_eq!(controls.len(), 1);
        assert!(
            controls[0].max_rel_err >= TOLERANCE,
            "negative control slipped through: {}",
            controls[0]
        );
        for o in &outcomes {
            assert!(o.good(), "{o}");
        }
    }

    #[test]
    fn block_scope_covers_blocks_fusion_and_every_loss_term() {
        let outcomes = run(Scope::Block).unwrap();
        let names: Vec<&str> = outcomes.iter().map(|o| o.name).collect();
        for want in [
            "pano_attention",
            "local_ffn",
            "pano_block",
            "fusion",
            "loss_depth_mse",
            "loss_depth_grad",
            "loss_depth_perceptual",
            "loss_normal_mse",
            "loss_normal_angle",
            "loss_normal_perceptual",
        ] {
            assert!(names.contains(&want), "missing {want}");
        }
        for o in &outcomes {
            assert!(o.good(), "{o}");
        }
    }

    // ~10 s, and the acceptance harness runs it anyway; opt in with --ignored
    #[test]
    #[ignore]
    fn network_scope_passes_on_sampled_parameters() {
        let outcomes = run(Scope::Network).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert!(outcomes[0].probes >= 26, "{}", outcomes[0]);
        assert!(outcomes[0].good(), "{}", outcomes[0]);
    }

    #[test]
    fn outcome_lines_read_as_a_report() {
        let ok = CheckOutcome { name: "relu", max_rel_err: 3.0e-9, probes: 24, expect_fail: false };
        let line = ok.to_string();
        assert!(line.starts_with("ok"), "{line}");
        assert!(line.contains("relu") && line.contains("24 probes"), "{line}");
        let bad = CheckOutcome { name: "relu", max_rel_err: 1.0, probes: 24, expect_fail: false };
        assert!(bad.to_string().starts_with("FAIL"));
        let control =
            CheckOutcome { name: "sigmoid_bad_grad", max_rel_err: 1.0, probes: 24, expect_fail: true };
        assert!(control.good() && control.to_string().contains("negative control"));
    }
}
