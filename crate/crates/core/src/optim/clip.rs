use super::l2_norm;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

pub const CLIP_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipConfig {
    pub enabled: bool,
    /// EMA momentum `m ∈ [0, 1)`.
    pub momentum: f64,
    /// Trigger factor `α`: clip when `‖g‖ > α · ‖EMA‖`.
    pub alpha: f64,
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            momentum: 0.4,
            alpha: 1.05,
        }
    }
}

impl ClipConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("clip.momentum", format!("{} not in [0, 1)", self.momentum)));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("clip.alpha", format!("{} must be > 0", self.alpha)));
        }
        Ok(())
    }
}

/// Adaptive clip for one parameter group.
///
/// Keeps an exponential moving average `G` of the raw gradient vector. A
/// gradient whose norm exceeds `α · ‖G_{t−1}‖` is rescaled to norm
/// `‖G_{t−1}‖ · ‖g‖ / (‖g‖ + ε)`. The first gradient seeds `G` and passes
/// through untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipState {
    pub momentum: f64,
    pub alpha: f64,
    pub epsilon: f64,
    ema: Option<Vec<f64>>,
}

impl ClipState {
    pub fn new(momentum: f64, alpha: f64) -> Self {
        Self {
            momentum,
            alpha,
            epsilon: CLIP_EPSILON,
            ema: None,
        }
    }

    /// State whose moving average starts at `ema` instead of the first gradient.
    pub fn with_ema(momentum: f64, alpha: f64, ema: Vec<f64>) -> Self {
        Self {
            ema: Some(ema),
            ..Self::new(momentum, alpha)
        }
    }

    pub fn ema(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }

    pub fn is_initialized(&self) -> bool {
        self.ema.is_some()
    }

    /// Clips `grad` in place and updates the average; returns whether the
    /// clip fired. An untriggered gradient is left bit-for-bit unchanged.
    pub fn apply(&mut self, grad: &mut [f64]) -> Result<bool> {
        let Some(ema) = self.ema.as_mut() else {
            self.ema = Some(grad.to_vec());
            return Ok(false);
        };
        if ema.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                context: "clip state",
                expected: vec![ema.len()],
                actual: vec![grad.len()],
            });
        }
        let prev_norm = l2_norm(ema);
        let norm = l2_norm(grad);
        let m = self.momentum;
        for (e, g) in ema.iter_mut().zip(grad.iter()) {
            *e = m * *e + (1.0 - m) * g;
        }
        let triggered = norm > self.alpha * prev_norm;
        if triggered {
            let scale = prev_norm / (norm + self.epsilon);
            grad.iter_mut().for_each(|g| *g *= scale);
        }
        Ok(triggered)
    }

    /// Returns the clipped copy of `grad`.
    pub fn clip_update(&mut self, grad: &[f64]) -> Result<Vec<f64>> {
        let mut out = grad.to_vec();
        self.apply(&mut out)?;
        Ok(out)
    }

    pub(crate) fn set_ema(&mut self, ema: Option<Vec<f64>>) {
        self.ema = ema;
    }
}

/// One [`ClipState`] per contiguous parameter range of a flat gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedClip {
    pub names: Vec<String>,
    pub ranges: Vec<Range<usize>>,
    pub states: Vec<ClipState>,
}

impl GroupedClip {
    pub fn new(groups: Vec<(String, Range<usize>)>, config: &ClipConfig) -> Self {
        let (names, ranges): (Vec<_>, Vec<_>) = groups.into_iter().unzip();
        let states = ranges
            .iter()
            .map(|_| ClipState::new(config.momentum, config.alpha))
            .collect();
        Self {
            names,
            ranges,
            states,
        }
    }

    /// Clips every group; returns whether any group fired.
    pub fn apply(&mut self, grad: &mut [f64]) -> Result<bool> {
        let mut any = false;
        for (range, state) in self.ranges.iter().zip(self.states.iter_mut()) {
            let len = grad.len();
            let slice = grad.get_mut(range.clone()).ok_or_else(|| Error::ShapeMismatch {
                context: "clip groups",
                expected: vec![range.end],
                actual: vec![len],
            })?;
            any |= state.apply(slice)?;
        }
        Ok(any)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_call_seeds_and_passes_through() {
        let mut s = ClipState::new(0.4, 1.05);
        let g = vec![3.0, -4.0];
        assert_eq!(s.clip_update(&g).unwrap(), g);
        assert_eq!(s.ema().unwrap(), g.as_slice());
    }

    #[test]
    fn untriggered_is_bitwise_identity() {
        let mut s = ClipState::with_ema(0.4, 1.05, vec![1.0, 1.0, 1.0]);
        let g = vec![0.1f64.sqrt(), -0.7, 1.0 / 3.0];
        let out = s.clip_update(&g).unwrap();
        assert!(out.iter().zip(&g).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn triggered_rescales_to_ema_norm() {
        let alpha = 1.05;
        let ema = vec![0.6, 0.8];
        let mut s = ClipState::with_ema(0.4, alpha, ema);
        let g = vec![10.0 * alpha, 0.0];
        let out = s.clip_update(&g).unwrap();
        let n = l2_norm(&out);
        let expected = 1.0 * 10.5 / (10.5 + CLIP_EPSILON);
        assert!((n - expected).abs() < 1e-15);
        assert!(n <= 1.0 && n >= 1.0 - 1e-6);
        // EMA is fed the raw gradient
        let e = s.ema().unwrap();
        assert!((e[0] - (0.4 * 0.6 + 0.6 * 10.5)).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut s = ClipState::with_ema(0.4, 1.05, vec![1.0; 3]);
        assert!(s.clip_update(&[1.0; 2]).is_err());
    }

    #[test]
    fn constant_stream_never_triggers_and_converges() {
        let g = vec![0.5, -2.0, 1.5];
        let g0 = vec![1.0, 1.0, -1.0];
        let m: f64 = 0.4;
        let mut s = ClipState::with_ema(m, 1.05, g0.clone());
        for t in 1..=30 {
            let out = s.clip_update(&g).unwrap();
            let closed: Vec<f64> = g
                .iter()
                .zip(&g0)
                .map(|(gi, g0i)| (1.0 - m.powi(t)) * gi + m.powi(t) * g0i)
                .collect();
            for (a, b) in s.ema().unwrap().iter().zip(&closed) {
                assert!((a - b).abs() < 1e-12);
            }
            if t > 6 {
                assert_eq!(out, g);
            }
        }
    }

    #[test]
    fn grouped_ranges() {
        let mut gc = GroupedClip::new(
            vec![("a".into(), 0..2), ("b".into(), 2..4)],
            &ClipConfig::default(),
        );
        let mut g = vec![1.0, 0.0, 0.0, 1.0];
        assert!(!gc.apply(&mut g).unwrap());
        let mut g2 = vec![1.0, 0.0, 0.0, 100.0];
        assert!(gc.apply(&mut g2).unwrap());
        assert_eq!(&g2[..2], &[1.0, 0.0]);
        assert!(g2[3] < 1.0 + 1e-9);
    }

    #[test]
    fn config_validation() {
        assert!(ClipConfig::default().validate().is_ok());
        assert!(ClipConfig { momentum: 1.0, ..Default::default() }.validate().is_err());
        assert!(ClipConfig { alpha: 0.0, ..Default::default() }.validate().is_err());
    }
}
