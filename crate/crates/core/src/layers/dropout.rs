use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng;

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` so the
/// expected train-mode output equals the input. Eval mode is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutLayer {
    rate: f64,
    pub mode: Mode,
    pub rng_seed: u64,
}

impl DropoutLayer {
    pub fn new(rate: f64, mode: Mode, rng_seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        Ok(DropoutLayer {
            rate,
            mode,
            rng_seed,
        })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mask(&self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        let mut r = rng::stream(self.rng_seed, &[len as u64]);
        (0..len)
            .map(|_| if r.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect()
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        if self.mode == Mode::Eval || self.rate == 0.0 {
            return Ok(x);
        }
        let mask = self.mask(g.value(x).len());
        g.dropout_mask(x, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn ramp(n: usize) -> Tensor {
        Tensor::from_vec(&[n], (0..n).map(|i| 1.0 + (i % 10) as f64).collect()).unwrap()
    }

    #[test]
    fn zero_rate_is_identity_in_both_modes() {
        for mode in [Mode::Train, Mode::Eval] {
            let d = DropoutLayer::new(0.0, mode, 3).unwrap();
            let mut g = Graph::new();
            let x = g.constant(ramp(20));
            let y = d.forward(&mut g, x).unwrap();
            assert_eq!(g.value(y), &ramp(20));
        }
    }

    #[test]
    fn eval_mode_is_identity() {
        let d = DropoutLayer::new(0.5, Mode::Eval, 3).unwrap();
        let mut g = Graph::new();
        let x = g.constant(ramp(20));
        let y = d.forward(&mut g, x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn train_mode_preserves_mean() {
        let n = 100_000;
        let d = DropoutLayer::new(0.5, Mode::Train, 17).unwrap();
        let mut g = Graph::new();
        let x = g.constant(ramp(n));
        let y = d.forward(&mut g, x).unwrap();
        let (mi, mo) = (g.value(x).mean(), g.value(y).mean());
        assert!((mo - mi).abs() / mi < 0.02, "{mi} vs {mo}");
        let zeros = g.value(y).data().iter().filter(|v| **v == 0.0).count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn invalid_rate() {
        assert!(matches!(DropoutLayer::new(1.0, Mode::Train, 0), Err(Error::InvalidRate(_))));
        assert!(matches!(DropoutLayer::new(-0.1, Mode::Train, 0), Err(Error::InvalidRate(_))));
    }

    #[test]
    fn mask_is_seeded() {
        let a = DropoutLayer::new(0.3, Mode::Train, 5).unwrap().mask(64);
        let b = DropoutLayer::new(0.3, Mode::Train, 5).unwrap().mask(64);
        let c = DropoutLayer::new(0.3, Mode::Train, 6).unwrap().mask(64);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
