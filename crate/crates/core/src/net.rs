//! The two-branch multi-task network.
//!
//! Data flow for an H x 2H panorama (H = 64 at desk scale, C0 channels):
//!
//! ```text
//! rgb [B,3,H,2H]
//!   └ shared embed: 3x3 conv, ReLU, 3x3 conv, ReLU, 2x2 maxpool -> C0 @ H/2
//! encoder level l = 1..4 (per branch, channels C0*2^(l-1)):
//!   pano_block -> fusion (residuals into both branches + shared f_fuse)
//!   -> strided 3x3 conv (halve H,W; double C)
//! bottleneck: one pano_block per branch @ H/32, 16*C0 channels
//! decoder stage i = 1..4 (per branch, mirroring level l = 5-i):
//!   bilinear x2 + 1x1 conv (halve C) -> concat(skip f'_l, f_fuse_l)
//!   -> 1x1 merge -> pano_block -> head: 3x3 conv, activation, bilinear x2
//! ```
//!
//! Depth heads end in a sigmoid (depth is trained in d/d_max units), normal
//! heads in a tanh per component. Multi-scale mode emits one prediction per
//! decoder stage at resolutions H/8 .. H; otherwise only the finest.
//!
//! Every parameter lives in a flat name -> tensor map with stable names, so
//! checkpoints, the optimizer and gradient checks all address parameters the
//! same way. Initialization is seeded per parameter name, which makes it
//! independent of enumeration order.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;

use crate::blocks::{
    grid_leaf, local_ffn, pano_attention, LocalFfnParams, PanoAttentionParams, PanoBlockParams,
};
use crate::geometry::{build_sampling_grid, ErpLayout, SamplingGrid};
use crate::tensor::{Conv2dOpts, Scalar, Tape, Tensor, TensorId, NORM_EPS};
use crate::{Error, Result};

/// Encoder (and decoder) stage count.
pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskMode {
    Both,
    DepthOnly,
    NormalOnly,
}

impl TaskMode {
    pub fn depth(self) -> bool {
        matches!(self, TaskMode::Both | TaskMode::DepthOnly)
    }

    pub fn normal(self) -> bool {
        matches!(self, TaskMode::Both | TaskMode::NormalOnly)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskMode::Both => "both",
            TaskMode::DepthOnly => "depth_only",
            TaskMode::NormalOnly => "normal_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(TaskMode::Both),
            "depth_only" => Ok(TaskMode::DepthOnly),
            "normal_only" => Ok(TaskMode::NormalOnly),
            other => Err(Error::config(format!("unknown task mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub heads: usize,
    pub k_side: usize,
    pub height: usize,
    pub width: usize,
    pub use_shared_fb: bool,
    pub use_fusion: bool,
    pub use_multiscale: bool,
    pub task_mode: TaskMode,
    /// meters mapped to sigmoid output 1.0
    pub d_max: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            heads: 2,
            k_side: 3,
            height: 256,
            width: 512,
            use_shared_fb: true,
            use_fusion: true,
            use_multiscale: true,
            task_mode: TaskMode::Both,
            d_max: 10.0,
        }
    }
}

impl NetworkConfig {
    /// The small configuration every test and example runs at.
    pub fn desk() -> Self {
        NetworkConfig { height: 64, width: 128, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels < 4 {
            return Err(Error::config(format!("base_channels {} < 4", self.base_channels)));
        }
        if self.heads == 0 || self.base_channels % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide base_channels {}",
                self.heads, self.base_channels
            )));
        }
        if self.k_side == 0 || self.k_side % 2 == 0 {
            return Err(Error::config(format!("k_side {} must be odd", self.k_side)));
        }
        let div = 1usize << (STAGES + 1);
        if self.height % div != 0 || self.height / div < 2 {
            return Err(Error::config(format!(
                "height {} must be a multiple of {div} with at least 2 bottleneck rows",
                self.height
            )));
        }
        if self.width != 2 * self.height {
            return Err(Error::config(format!(
                "width {} must be 2 x height {}",
                self.width, self.height
            )));
        }
        if !(self.d_max > 0.0) {
            return Err(Error::config(format!("d_max {} must be positive", self.d_max)));
        }
        Ok(())
    }

    /// (channels, height, width) of encoder level `l` in 1..=4.
    pub fn level_dims(&self, l: usize) -> (usize, usize, usize) {
        (self.base_channels << (l - 1), self.height >> l, self.width >> l)
    }

    pub fn bottleneck_dims(&self) -> (usize, usize, usize) {
        (
            self.base_channels << STAGES,
            self.height >> (STAGES + 1),
            self.width >> (STAGES + 1),
        )
    }

    pub fn k(&self) -> usize {
        self.k_side * self.k_side
    }
}

/// Precomputed spherical sampling grids for every resolution the network
/// touches. Grids depend only on resolution and `k_side`, never on data.
pub struct GridSet {
    grids: BTreeMap<(usize, usize), SamplingGrid>,
}

impl GridSet {
    pub fn for_config(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let mut grids = BTreeMap::new();
        for l in 1..=STAGES + 1 {
            let (h, w) = (cfg.height >> l, cfg.width >> l);
            let layout = ErpLayout::new(h, w).map_err(|e| Error::config(e.to_string()))?;
            let grid = build_sampling_grid(layout, cfg.k_side, layout.pixel_pitch())
                .map_err(|e| Error::config(e.to_string()))?;
            grids.insert((h, w), grid);
        }
        Ok(GridSet { grids })
    }

    pub fn get(&self, h: usize, w: usize) -> Result<&SamplingGrid> {
        self.grids
            .get(&(h, w))
            .ok_or_else(|| Error::invalid(format!("no sampling grid for {h}x{w}")))
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    One,
    /// Normal(0, sqrt(2 / fan_in)), for convs feeding a ReLU-family activation
    Kaiming(usize),
    /// Normal(0, sqrt(1 / fan_in)), for convs with a linear or squashing output
    Xavier(usize),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WInit {
    Kaiming,
    Xavier,
    /// residual output projections and flow heads start inert
    Zero,
}

fn conv_specs(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, ksz: usize, wi: WInit) {
    let fan_in = cin * ksz * ksz;
    let init = match wi {
        WInit::Kaiming => Init::Kaiming(fan_in),
        WInit::Xavier => Init::Xavier(fan_in),
        WInit::Zero => Init::Zero,
    };
    out.push(ParamSpec { name: format!("{name}.w"), shape: vec![cout, cin, ksz, ksz], init });
    out.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zero });
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, heads: usize, k: usize) {
    let push_norm = |out: &mut Vec<ParamSpec>, name: String| {
        out.push(ParamSpec { name: format!("{name}.gain"), shape: vec![c], init: Init::One });
        out.push(ParamSpec { name: format!("{name}.shift"), shape: vec![c], init: Init::Zero });
    };
    push_norm(out, format!("{prefix}.attn.norm"));
    conv_specs(out, &format!("{prefix}.attn.flow"), c, heads * k * 2, 1, WInit::Zero);
    conv_specs(out, &format!("{prefix}.attn.logit"), c, heads * k, 1, WInit::Xavier);
    conv_specs(out, &format!("{prefix}.attn.value"), c, c, 1, WInit::Xavier);
    // zero residual projections keep early features (and so head inputs)
    // at the embedding's scale instead of growing with depth
    conv_specs(out, &format!("{prefix}.attn.out"), c, c, 1, WInit::Zero);
    push_norm(out, format!("{prefix}.ffn.norm"));
    conv_specs(out, &format!("{prefix}.ffn.expand"), c, 2 * c, 1, WInit::Kaiming);
    // depthwise: one 3x3 filter per expanded channel
    out.push(ParamSpec {
        name: format!("{prefix}.ffn.dw.w"),
        shape: vec![2 * c, 1, 3, 3],
        init: Init::Kaiming(9),
    });
    out.push(ParamSpec { name: format!("{prefix}.ffn.dw.b"), shape: vec![2 * c], init: Init::Zero });
    conv_specs(out, &format!("{prefix}.ffn.contract"), 2 * c, c, 1, WInit::Zero);
}

fn sn_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    out.push(ParamSpec { name: format!("{prefix}.mean_logits"), shape: vec![3], init: Init::Zero });
    out.push(ParamSpec { name: format!("{prefix}.var_logits"), shape: vec![3], init: Init::Zero });
    out.push(ParamSpec { name: format!("{prefix}.gain"), shape: vec![c], init: Init::One });
    out.push(ParamSpec { name: format!("{prefix}.shift"), shape: vec![c], init: Init::Zero });
}

/// Every parameter of the network, in a deterministic order. The state always
/// contains both branches and all fusion modules, whatever the ablation
/// toggles say, so checkpoints stay layout-compatible across ablations of the
/// same architecture.
fn param_specs(cfg: &NetworkConfig) -> Vec<ParamSpec> {
    let c0 = cfg.base_channels;
    let (heads, k) = (cfg.heads, cfg.k());
    let mut out = Vec::new();

    let embed = |out: &mut Vec<ParamSpec>, prefix: &str| {
        conv_specs(out, &format!("{prefix}.c1"), 3, c0, 3, WInit::Kaiming);
        conv_specs(out, &format!("{prefix}.c2"), c0, c0, 3, WInit::Kaiming);
    };
    if cfg.use_shared_fb {
        embed(&mut out, "embed");
    } else {
        embed(&mut out, "embed.depth");
        embed(&mut out, "embed.normal");
    }

    for branch in ["depth", "normal"] {
        for l in 1..=STAGES {
            let (c, _, _) = cfg.level_dims(l);
            block_specs(&mut out, &format!("enc.{branch}.l{l}.block"), c, heads, k);
            conv_specs(&mut out, &format!("enc.{branch}.l{l}.down"), c, 2 * c, 3, WInit::Xavier);
        }
        let (cb, _, _) = cfg.bottleneck_dims();
        block_specs(&mut out, &format!("bot.{branch}.block"), cb, heads, k);
        for i in 1..=STAGES {
            let (c, _, _) = cfg.level_dims(STAGES + 1 - i);
            conv_specs(&mut out, &format!("dec.{branch}.s{i}.up"), 2 * c, c, 1, WInit::Xavier);
            conv_specs(&mut out, &format!("dec.{branch}.s{i}.merge"), 3 * c, c, 1, WInit::Xavier);
            block_specs(&mut out, &format!("dec.{branch}.s{i}.block"), c, heads, k);
            let t = if branch == "depth" { 1 } else { 3 };
            conv_specs(&mut out, &format!("dec.{branch}.s{i}.head"), c, t, 3, WInit::Xavier);
        }
    }

    for l in 1..=STAGES {
        let (c, _, _) = cfg.level_dims(l);
        for part in ["depth", "normal", "fuse"] {
            // not zero like the other residual entries: the relu after the
            // norm sits at exactly 0 for a zero conv, so a zero start would
            // never receive gradient and fusion could never turn on
            conv_specs(&mut out, &format!("fuse.l{l}.{part}.conv"), 2 * c, c, 1, WInit::Xavier);
            sn_specs(&mut out, &format!("fuse.l{l}.{part}.sn"), c);
        }
    }
    out
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// All learnable tensors, keyed by stable dotted names.
#[derive(Debug, Clone)]
pub struct NetworkState<S: Scalar> {
    pub params: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> NetworkState<S> {
    /// Seeded initialization. Each parameter draws from its own stream keyed
    /// by `seed ^ fnv1a(name)`, so values do not depend on enumeration order.
    pub fn init(cfg: &NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        for spec in param_specs(cfg) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<S> = match spec.init {
                Init::Zero => vec![S::zero(); n],
                Init::One => vec![S::one(); n],
                Init::Kaiming(fan_in) | Init::Xavier(fan_in) => {
                    let gain = if matches!(spec.init, Init::Kaiming(_)) { 2.0 } else { 1.0 };
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(&spec.name));
                    let dist = rand_distr::Normal::new(0.0f64, (gain / fan_in as f64).sqrt())
                        .expect("finite std");
                    (0..n).map(|_| S::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            let t = Tensor::new(spec.shape, data)
                .map_err(|e| Error::invalid(format!("param {}: {e}", spec.name)))?
                .with_grad();
            params.insert(spec.name, t);
        }
        Ok(NetworkState { params })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> NetworkState<T> {
        NetworkState {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Insert every parameter into the tape; returns name -> id.
    pub fn register(&self, tape: &mut Tape<S>) -> Result<BTreeMap<String, TensorId>> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.params {
            ids.insert(name.clone(), tape.leaf(t.clone())?);
        }
        Ok(ids)
    }
}

/// Closed-form parameter count, assembled from per-layer formulas. The unit
/// tests hold this against the enumerated state as an independent oracle.
pub fn expected_param_count(cfg: &NetworkConfig) -> usize {
    let c0 = cfg.base_channels;
    let (m, k) = (cfg.heads, cfg.k());
    let conv = |cin: usize, cout: usize, ksz: usize| cout * cin * ksz * ksz + cout;
    // block(c) = two norms + flow/logit/value/out 1x1 convs
    //          + expand 1x1, depthwise 3x3, contract 1x1
    let block = |c: usize| {
        2 * c
            + conv(c, m * k * 2, 1)
            + conv(c, m * k, 1)
            + conv(c, c, 1)
            + conv(c, c, 1)
            + 2 * c
            + conv(c, 2 * c, 1)
            + (2 * c * 9 + 2 * c)
            + conv(2 * c, c, 1)
    };
    let embed = conv(3, c0, 3) + conv(c0, c0, 3);
    let embeds = if cfg.use_shared_fb { embed } else { 2 * embed };

    let mut per_branch = 0usize;
    for l in 1..=STAGES {
        let c = c0 << (l - 1);
        per_branch += block(c) + conv(c, 2 * c, 3);
    }
    per_branch += block(c0 << STAGES);
    let mut heads_total = 0usize;
    for i in 1..=STAGES {
        let c = (c0 << (STAGES - 1)) >> (i - 1);
        per_branch += conv(2 * c, c, 1) + conv(3 * c, c, 1) + block(c);
        heads_total += conv(c, 1, 3) + conv(c, 3, 3); // depth head + normal head
    }

    let mut fusion = 0usize;
    for l in 1..=STAGES {
        let c = c0 << (l - 1);
        fusion += 3 * (conv(2 * c, c, 1) + (2 * c + 6));
    }
    embeds + 2 * per_branch + heads_total + fusion
}

/// Multi-scale predictions, coarsest first; the last entry is input
/// resolution. Empty for a branch the task mode disables.
pub struct Predictions {
    pub depth: Vec<TensorId>,
    pub normal: Vec<TensorId>,
}

pub struct ForwardPass {
    pub preds: Predictions,
    pub param_ids: BTreeMap<String, TensorId>,
}

/// Register the state's parameters on the tape and run the network.
pub fn forward<S: Scalar>(
    tape: &mut Tape<S>,
    rgb: TensorId,
    state: &NetworkState<S>,
    cfg: &NetworkConfig,
    grids: &GridSet,
) -> Result<ForwardPass> {
    let param_ids = state.register(tape)?;
    let preds = forward_with_ids(tape, rgb, &param_ids, cfg, grids)?;
    Ok(ForwardPass { preds, param_ids })
}

fn pid(ids: &BTreeMap<String, TensorId>, name: &str) -> Result<TensorId> {
    ids.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
}

fn conv_named<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    ids: &BTreeMap<String, TensorId>,
    name: &str,
    opts: Conv2dOpts,
) -> Result<TensorId> {
    let w = pid(ids, &format!("{name}.w"))?;
    let b = pid(ids, &format!("{name}.b"))?;
    Ok(tape.conv2d(x, w, b, opts)?)
}

fn block_params(
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
    heads: usize,
) -> Result<PanoBlockParams> {
    let g = |suffix: &str| pid(ids, &format!("{prefix}.{suffix}"));
    Ok(PanoBlockParams {
        attn: PanoAttentionParams {
            heads,
            norm_gain: g("attn.norm.gain")?,
            norm_shift: g("attn.norm.shift")?,
            flow_w: g("attn.flow.w")?,
            flow_b: g("attn.flow.b")?,
            attn_w: g("attn.logit.w")?,
            attn_b: g("attn.logit.b")?,
            value_w: g("attn.value.w")?,
            value_b: g("attn.value.b")?,
            out_w: g("attn.out.w")?,
            out_b: g("attn.out.b")?,
        },
        ffn: LocalFfnParams {
            norm_gain: g("ffn.norm.gain")?,
            norm_shift: g("ffn.norm.shift")?,
            expand_w: g("ffn.expand.w")?,
            expand_b: g("ffn.expand.b")?,
            dw_w: g("ffn.dw.w")?,
            dw_b: g("ffn.dw.b")?,
            contract_w: g("ffn.contract.w")?,
            contract_b: g("ffn.contract.b")?,
        },
    })
}

fn run_block<S: Scalar>(
    tape: &mut Tape<S>,
    x: TensorId,
    grid: TensorId,
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
    heads: usize,
) -> Result<TensorId> {
    let p = block_params(ids, prefix, heads)?;
    let a = pano_attention(tape, x, grid, &p.attn)?;
    Ok(local_ffn(tape, a, &p.ffn)?)
}

fn embed<S: Scalar>(
    tape: &mut Tape<S>,
    rgb: TensorId,
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
) -> Result<TensorId> {
    let o = Conv2dOpts::same_wrapped();
    let h = conv_named(tape, rgb, ids, &format!("{prefix}.c1"), o)?;
    let h = tape.relu(h)?;
    let h = conv_named(tape, h, ids, &format!("{prefix}.c2"), o)?;
    let h = tape.relu(h)?;
    Ok(tape.maxpool2(h)?)
}

/// Refined branch features and the shared fused feature of one level.
pub struct FusionOutputs {
    pub depth: TensorId,
    pub normal: TensorId,
    pub fuse: TensorId,
}

/// concat both branches, then three (1x1 conv, switchable norm, ReLU) blocks:
/// two residuals back into the branches, one shared fused map.
pub fn fuse_level<S: Scalar>(
    tape: &mut Tape<S>,
    f_depth: TensorId,
    f_normal: TensorId,
    ids: &BTreeMap<String, TensorId>,
    prefix: &str,
) -> Result<FusionOutputs> {
    if tape.shape(f_depth) != tape.shape(f_normal) {
        return Err(Error::invalid(format!(
            "fusion inputs disagree: {:?} vs {:?}",
            tape.shape(f_depth),
            tape.shape(f_normal)
        )));
    }
    let cat = tape.concat(&[f_depth, f_normal], 1)?;
    let branch = |tape: &mut Tape<S>, part: &str| -> Result<TensorId> {
        let p = format!("{prefix}.{part}");
        let h = conv_named(tape, cat, ids, &format!("{p}.conv"), Conv2dOpts::pointwise())?;
        let h = tape.switchable_norm(
            h,
            pid(ids, &format!("{p}.sn.mean_logits"))?,
            pid(ids, &format!("{p}.sn.var_logits"))?,
            pid(ids, &format!("{p}.sn.gain"))?,
            pid(ids, &format!("{p}.sn.shift"))?,
            NORM_EPS,
        )?;
        Ok(tape.relu(h)?)
    };
    let rd = branch(tape, "depth")?;
    let rn = branch(tape, "normal")?;
    let fuse = branch(tape, "fuse")?;
    Ok(FusionOutputs {
        depth: tape.add(f_depth, rd)?,
        normal: tape.add(f_normal, rn)?,
        fuse,
    })
}

/// Run the full network on an already-inserted `[B, 3, H, W]` tensor with
/// values in [0, 1]. `ids` must come from [`NetworkState::register`] (or an
/// equivalent insertion of every parameter).
pub fn forward_with_ids<S: Scalar>(
    tape: &mut Tape<S>,
    rgb: TensorId,
    ids: &BTreeMap<String, TensorId>,
    cfg: &NetworkConfig,
    grids: &GridSet,
) -> Result<Predictions> {
    cfg.validate()?;
    let xs = tape.shape(rgb).to_vec();
    if xs.len() != 4 || xs[1] != 3 || xs[2] != cfg.height || xs[3] != cfg.width {
        return Err(Error::invalid(format!(
            "expected rgb [B, 3, {}, {}], got {:?}",
            cfg.height, cfg.width, xs
        )));
    }
    let b = xs[0];
    if tape.data(rgb).iter().any(|v| {
        let f = v.into_f64();
        !(0.0..=1.0).contains(&f)
    }) {
        return Err(Error::invalid("rgb values must lie in [0, 1]"));
    }

    let do_d = cfg.task_mode.depth();
    let do_n = cfg.task_mode.normal();
    let fusion_on = cfg.use_fusion && cfg.task_mode == TaskMode::Both;
    let heads = cfg.heads;

    let mut gids: BTreeMap<(usize, usize), TensorId> = BTreeMap::new();
    for l in 1..=STAGES + 1 {
        let (h, w) = (cfg.height >> l, cfg.width >> l);
        let g = grid_leaf(tape, grids.get(h, w)?)?;
        gids.insert((h, w), g);
    }

    let (mut fd, mut fnr) = if cfg.use_shared_fb {
        let e = embed(tape, rgb, ids, "embed")?;
        (do_d.then_some(e), do_n.then_some(e))
    } else {
        let d = if do_d { Some(embed(tape, rgb, ids, "embed.depth")?) } else { None };
        let n = if do_n { Some(embed(tape, rgb, ids, "embed.normal")?) } else { None };
        (d, n)
    };

    // per level: (f'_depth, f'_normal, f_fuse) at the level's resolution
    let mut levels: Vec<(Option<TensorId>, Option<TensorId>, TensorId)> = Vec::new();
    for l in 1..=STAGES {
        let (c, h, w) = cfg.level_dims(l);
        let g = gids[&(h, w)];
        if let Some(f) = fd {
            fd = Some(run_block(tape, f, g, ids, &format!("enc.depth.l{l}.block"), heads)?);
        }
        if let Some(f) = fnr {
            fnr = Some(run_block(tape, f, g, ids, &format!("enc.normal.l{l}.block"), heads)?);
        }
        let (pd, pn, pf) = if fusion_on {
            let fo = fuse_level(tape, fd.unwrap(), fnr.unwrap(), ids, &format!("fuse.l{l}"))?;
            (Some(fo.depth), Some(fo.normal), fo.fuse)
        } else {
            let zero = tape.constant(Tensor::zeros(&[b, c, h, w]))?;
            (fd, fnr, zero)
        };
        levels.push((pd, pn, pf));

        let down = Conv2dOpts { stride: 2, pad: 1, wrap_w: true, groups: 1 };
        fd = match pd {
            Some(f) => Some(conv_named(tape, f, ids, &format!("enc.depth.l{l}.down"), down)?),
            None => None,
        };
        fnr = match pn {
            Some(f) => Some(conv_named(tape, f, ids, &format!("enc.normal.l{l}.down"), down)?),
            None => None,
        };
    }

    let (_, bh, bw) = cfg.bottleneck_dims();
    let bg = gids[&(bh, bw)];
    let bot_d = match fd {
        Some(f) => Some(run_block(tape, f, bg, ids, "bot.depth.block", heads)?),
        None => None,
    };
    let bot_n = match fnr {
        Some(f) => Some(run_block(tape, f, bg, ids, "bot.normal.block", heads)?),
        None => None,
    };

    let depth = match bot_d {
        Some(bot) => {
            let skips: Vec<(TensorId, TensorId)> =
                levels.iter().map(|(d, _, f)| (d.unwrap(), *f)).collect();
            decode_branch(tape, ids, cfg, &gids, "depth", bot, &skips)?
        }
        None => Vec::new(),
    };
    let normal = match bot_n {
        Some(bot) => {
            let skips: Vec<(TensorId, TensorId)> =
                levels.iter().map(|(_, n, f)| (n.unwrap(), *f)).collect();
            decode_branch(tape, ids, cfg, &gids, "normal", bot, &skips)?
        }
        None => Vec::new(),
    };
    Ok(Predictions { depth, normal })
}

fn decode_branch<S: Scalar>(
    tape: &mut Tape<S>,
    ids: &BTreeMap<String, TensorId>,
    cfg: &NetworkConfig,
    gids: &BTreeMap<(usize, usize), TensorId>,
    branch: &str,
    bottleneck: TensorId,
    skips: &[(TensorId, TensorId)],
) -> Result<Vec<TensorId>> {
    let mut f = bottleneck;
    let mut outs = Vec::new();
    for i in 1..=STAGES {
        let l = STAGES + 1 - i;
        let (_, h, w) = cfg.level_dims(l);
        let up = tape.bilinear_resize(f, h, w, true)?;
        let up = conv_named(tape, up, ids, &format!("dec.{branch}.s{i}.up"), Conv2dOpts::pointwise())?;
        let (skip, fuse) = skips[l - 1];
        let cat = tape.concat(&[up, skip, fuse], 1)?;
        let merged =
            conv_named(tape, cat, ids, &format!("dec.{branch}.s{i}.merge"), Conv2dOpts::pointwise())?;
        f = run_block(tape, merged, gids[&(h, w)], ids, &format!("dec.{branch}.s{i}.block"), cfg.heads)?;
        if cfg.use_multiscale || i == STAGES {
            let raw = conv_named(
                tape,
                f,
                ids,
                &format!("dec.{branch}.s{i}.head"),
                Conv2dOpts::same_wrapped(),
            )?;
            let act = if branch == "depth" { tape.sigmoid(raw)? } else { tape.tanh(raw)? };
            outs.push(tape.bilinear_resize(act, 2 * h, 2 * w, true)?);
        }
    }
    Ok(outs)
}
