use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Init, Tensor};

/// Fully connected layer, `y = x·Wᵀ + b` with `weight: [out, in]`.
#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearLayer {
    pub fn new(fan_in: usize, fan_out: usize, seed: u64) -> Result<Self> {
        Ok(LinearLayer {
            weight: Tensor::create(&[fan_out, fan_in], Init::FanInGaussian(seed))?,
            bias: Tensor::create(&[fan_out], Init::Zeros)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(format!("{prefix}.weight"), self.weight.clone());
        let b = g.param(format!("{prefix}.bias"), self.bias.clone());
        g.linear(x, w, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn identity_weights() {
        let layer = LinearLayer {
            weight: Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap(),
            bias: Tensor::zeros(&[2]),
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let y = layer.forward(&mut g, "fc", x).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
    }

    #[test]
    fn hand_arithmetic() {
        let layer = LinearLayer {
            weight: Tensor::from_vec(&[1, 2], vec![1., 1.]).unwrap(),
            bias: Tensor::from_vec(&[1], vec![0.5]).unwrap(),
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(&[1, 2], vec![1., 2.]).unwrap());
        let y = layer.forward(&mut g, "fc", x).unwrap();
        assert_eq!(g.value(y).data(), &[3.5]);
    }

    #[test]
    fn dim_mismatch() {
        let layer = LinearLayer::new(3, 2, 0).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert!(matches!(layer.forward(&mut g, "fc", x), Err(Error::ShapeMismatch(_))));
    }
}
