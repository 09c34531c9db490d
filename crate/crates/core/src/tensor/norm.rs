//! Normalization layers, composed from primitive tape ops so the backward
//! pass comes for free.
//!
//! All statistics are computed from the current minibatch; nothing keeps
//! running averages, so train-mode and eval-mode forwards are identical.

use super::{arg_err, Scalar, Tape, TensorError, TensorId};

/// Statistic axes over a `[B, C, H, W]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// per channel, over batch and space
    Batch,
    /// per sample, over channels and space
    Layer,
    /// per sample and channel, over space
    Instance,
}

impl NormMode {
    fn axes(self) -> &'static [usize] {
        match self {
            NormMode::Batch => &[0, 2, 3],
            NormMode::Layer => &[1, 2, 3],
            NormMode::Instance => &[2, 3],
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;

impl<S: Scalar> Tape<S> {
    fn check_norm_args(
        &self,
        op: &'static str,
        x: TensorId,
        gain: TensorId,
        shift: TensorId,
    ) -> Result<usize, TensorError> {
        let xs = self.shape(x);
        if xs.len() != 4 {
            return Err(arg_err(op, format!("input must be [B,C,H,W], got {xs:?}")));
        }
        let c = xs[1];
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(arg_err(
                op,
                format!(
                    "gain {:?} / shift {:?} for {c} channels",
                    self.shape(gain),
                    self.shape(shift)
                ),
            ));
        }
        Ok(c)
    }

    fn affine_chw(
        &mut self,
        xhat: TensorId,
        gain: TensorId,
        shift: TensorId,
        c: usize,
    ) -> Result<TensorId, TensorError> {
        let g = self.reshape(gain, &[1, c, 1, 1])?;
        let b = self.reshape(shift, &[1, c, 1, 1])?;
        let scaled = self.mul(xhat, g)?;
        self.add(scaled, b)
    }

    /// (mean, biased variance) over the mode's statistic axes, kept dims.
    fn moments(&mut self, x: TensorId, axes: &[usize]) -> Result<(TensorId, TensorId), TensorError> {
        let mean = self.mean_axes(x, axes)?;
        let centered = self.sub(x, mean)?;
        let sq = self.mul(centered, centered)?;
        let var = self.mean_axes(sq, axes)?;
        Ok((mean, var))
    }

    /// Standardize over the statistic axes of `mode`, then apply a
    /// per-channel affine.
    pub fn normalize_layer(
        &mut self,
        x: TensorId,
        mode: NormMode,
        gain: TensorId,
        shift: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let c = self.check_norm_args("normalize_layer", x, gain, shift)?;
        let (mean, var) = self.moments(x, mode.axes())?;
        let centered = self.sub(x, mean)?;
        let var_eps = self.add_scalar(var, eps)?;
        let denom = self.sqrt(var_eps)?;
        let xhat = self.div(centered, denom)?;
        self.affine_chw(xhat, gain, shift, c)
    }

    /// Switchable normalization: softmax-weighted blend of the batch, layer
    /// and instance statistics (means and variances mixed with their own
    /// weight triples), then standardize and apply the affine.
    pub fn switchable_norm(
        &mut self,
        x: TensorId,
        mean_logits: TensorId,
        var_logits: TensorId,
        gain: TensorId,
        shift: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let c = self.check_norm_args("switchable_norm", x, gain, shift)?;
        if self.shape(mean_logits) != [3] || self.shape(var_logits) != [3] {
            return Err(arg_err(
                "switchable_norm",
                format!(
                    "logit shapes {:?} / {:?}, want [3]",
                    self.shape(mean_logits),
                    self.shape(var_logits)
                ),
            ));
        }
        let modes = [NormMode::Batch, NormMode::Layer, NormMode::Instance];
        let w_mean = self.softmax(mean_logits, 0)?;
        let w_var = self.softmax(var_logits, 0)?;
        let mut mixed_mean: Option<TensorId> = None;
        let mut mixed_var: Option<TensorId> = None;
        for (k, mode) in modes.iter().enumerate() {
            let (mean, var) = self.moments(x, mode.axes())?;
            let wm = self.narrow(w_mean, 0, k, 1)?;
            let wm = self.reshape(wm, &[1, 1, 1, 1])?;
            let wv = self.narrow(w_var, 0, k, 1)?;
            let wv = self.reshape(wv, &[1, 1, 1, 1])?;
            let m_term = self.mul(mean, wm)?;
            let v_term = self.mul(var, wv)?;
            mixed_mean = Some(match mixed_mean {
                None => m_term,
                Some(acc) => self.add(acc, m_term)?,
            });
            mixed_var = Some(match mixed_var {
                None => v_term,
                Some(acc) => self.add(acc, v_term)?,
            });
        }
        let centered = self.sub(x, mixed_mean.unwrap())?;
        let var_eps = self.add_scalar(mixed_var.unwrap(), eps)?;
        let denom = self.sqrt(var_eps)?;
        let xhat = self.div(centered, denom)?;
        self.affine_chw(xhat, gain, shift, c)
    }
}
