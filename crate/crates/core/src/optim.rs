//! Bias-corrected Adam with optional global-norm gradient clipping.
//!
//! Moments live in the same precision as the parameters and are part of the
//! checkpoint, so a resumed run continues bit-identically. The update math
//! runs in f64 regardless of the parameter type; it is deterministic either
//! way, and f32 training keeps f64 accuracy inside the step.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Default bound on the global gradient norm; `None` disables clipping for
/// fidelity runs.
pub const DEFAULT_CLIP: Option<f64> = Some(5.0);

/// First/second moment buffers plus the shared step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    pub step: u64,
    pub m: BTreeMap<String, Vec<S>>,
    pub v: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Default for Adam<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// What one step did, for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor the gradients were scaled by (1 when unclipped).
    pub clip_scale: f64,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Adam { step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Apply one update to `params` in place. `grads` must hold a finite
    /// gradient of matching length for every parameter it names; parameters
    /// without an entry (frozen or inactive branches) are left alone, and
    /// their moments stay untouched.
    pub fn step(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Vec<S>>,
        lr: f64,
        clip: Option<f64>,
    ) -> Result<StepStats> {
        if !(lr > 0.0) {
            return Err(Error::invalid(format!("learning rate {lr} must be positive")));
        }
        let mut sq = 0.0f64;
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unknown parameter {name}")))?;
            if p.data.len() != g.len() {
                return Err(Error::invalid(format!(
                    "gradient for {name} has {} values, parameter has {}",
                    g.len(),
                    p.data.len()
                )));
            }
            for v in g {
                let f = v.into_f64();
                if !f.is_finite() {
                    return Err(Error::invalid(format!("non-finite gradient in {name}")));
                }
                sq += f * f;
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let n = p.data.len();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![S::zero(); n]);
            if m.len() != n || v.len() != n {
                return Err(Error::invalid(format!("moment size mismatch for {name}")));
            }
            for i in 0..n {
                let gi = g[i].into_f64() * clip_scale;
                let mi = ADAM_BETA1 * m[i].into_f64() + (1.0 - ADAM_BETA1) * gi;
                let vi = ADAM_BETA2 * v[i].into_f64() + (1.0 - ADAM_BETA2) * gi * gi;
                m[i] = S::from_f64(mi);
                v[i] = S::from_f64(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + ADAM_EPS);
                p.data[i] = S::from_f64(p.data[i].into_f64() - update);
            }
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> BTreeMap<String, Tensor<f64>> {
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::scalar(v));
        p
    }

    fn grad_of(vals: &[(&str, Vec<f64>)]) -> BTreeMap<String, Vec<f64>> {
        vals.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn first_step_moves_by_almost_exactly_the_learning_rate() {
        for g in [0.3, -2.0, 1e4] {
            let mut params = scalar_param(1.0);
            let mut adam = Adam::new();
            adam.step(&mut params, &grad_of(&[("w", vec![g])]), 1e-3, None).unwrap();
            let moved = 1.0 - params["w"].data[0];
            // Bias correction makes m_hat = g and v_hat = g^2, so the first
            // update is lr * g / (|g| + eps) regardless of the magnitude.
            let want = 1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((moved - want).abs() < 1e-12, "g={g}: moved {moved}");
            assert!((moved.abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_parameters_but_decays_moments() {
        let mut params = scalar_param(0.5);
        let mut adam = Adam::new();
        adam.step(&mut params, &grad_of(&[("w", vec![2.0])]), 1e-3, None).unwrap();
        let after_one = params["w"].data[0];
        let m1 = adam.m["w"][0];
        adam.step(&mut params, &grad_of(&[("w", vec![0.0])]), 1e-3, None).unwrap();
        // m decays by beta1; with a zero gradient the update is tiny but the
        // parameter still drifts by the decayed momentum, never by more.
        assert!((adam.m["w"][0] - ADAM_BETA1 * m1).abs() < 1e-15);
        assert!((params["w"].data[0] - after_one).abs() <= 1e-3 + 1e-12);

        let mut frozen = scalar_param(0.5);
        let mut adam = Adam::new();
        adam.step(&mut frozen, &BTreeMap::new(), 1e-3, None).unwrap();
        assert_eq!(frozen["w"].data[0], 0.5);
    }

    #[test]
    fn identical_gradients_produce_identical_updates() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::full(&[3], 1.0f64));
        params.insert("b".to_string(), Tensor::full(&[3], 1.0f64));
        let mut adam = Adam::new();
        for step in 0..5 {
            let g = vec![0.1 * (step + 1) as f64; 3];
            adam.step(
                &mut params,
                &grad_of(&[("a", g.clone()), ("b", g)]),
                1e-2,
                DEFAULT_CLIP,
            )
            .unwrap();
            assert_eq!(params["a"].data, params["b"].data);
            assert_eq!(adam.m["a"], adam.m["b"]);
        }
    }

    #[test]
    fn clipping_rescales_to_the_global_norm_bound() {
        let mut params = BTreeMap::new();
        params.insert("a".to_string(), Tensor::full(&[2], 0.0f64));
        params.insert("b".to_string(), Tensor::full(&[2], 0.0f64));
        // Gradient (3,0,4,0) has norm 5 across both tensors.
        let grads = grad_of(&[("a", vec![3.0, 0.0]), ("b", vec![4.0, 0.0])]);

        let mut adam = Adam::new();
        let stats = adam.step(&mut params, &grads, 1e-3, Some(2.5)).unwrap();
        assert!((stats.grad_norm - 5.0).abs() < 1e-12);
        assert!((stats.clip_scale - 0.5).abs() < 1e-12);
        // Moments saw the scaled gradient.
        assert!((adam.m["a"][0] - (1.0 - ADAM_BETA1) * 1.5).abs() < 1e-12);

        let mut unclipped = Adam::new();
        let mut p2 = BTreeMap::new();
        p2.insert("a".to_string(), Tensor::full(&[2], 0.0f64));
        p2.insert("b".to_string(), Tensor::full(&[2], 0.0f64));
        let stats = unclipped.step(&mut p2, &grads, 1e-3, Some(10.0)).unwrap();
        assert_eq!(stats.clip_scale, 1.0);
    }

    #[test]
    fn bad_inputs_are_rejected_with_names() {
        let mut params = scalar_param(1.0);
        let mut adam = Adam::new();
        let err = adam
            .step(&mut params, &grad_of(&[("w", vec![f64::NAN])]), 1e-3, None)
            .unwrap_err();
        assert!(err.to_string().contains("w"), "{err}");
        let err = adam
            .step(&mut params, &grad_of(&[("nope", vec![1.0])]), 1e-3, None)
            .unwrap_err();
        assert!(err.to_string().contains("nope"));
        let err = adam
            .step(&mut params, &grad_of(&[("w", vec![1.0, 2.0])]), 1e-3, None)
            .unwrap_err();
        assert!(err.to_string().contains("w"));
        assert!(adam.step(&mut params, &BTreeMap::new(), 0.0, None).is_err());
    }

    #[test]
    fn moments_survive_a_manual_save_restore() {
        // The checkpoint stores m, v and step verbatim; continuing from a
        // copied optimizer matches continuing in place bit for bit.
        let grads1 = grad_of(&[("w", vec![0.7])]);
        let grads2 = grad_of(&[("w", vec![-0.2])]);
        let mut p_full = scalar_param(1.0);
        let mut a_full = Adam::new();
        a_full.step(&mut p_full, &grads1, 1e-3, DEFAULT_CLIP).unwrap();
        let snapshot = (a_full.clone(), p_full.clone());
        a_full.step(&mut p_full, &grads2, 1e-3, DEFAULT_CLIP).unwrap();

        let (mut a_resumed, mut p_resumed) = snapshot;
        a_resumed.step(&mut p_resumed, &grads2, 1e-3, DEFAULT_CLIP).unwrap();
        assert_eq!(p_full["w"].data, p_resumed["w"].data);
        assert_eq!(a_full, a_resumed);
    }
}
