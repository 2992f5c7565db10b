use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Init, Tensor};

/// 2-D cross-correlation layer. `weight: [out_ch, in_ch, kh, kw]`.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    /// A "same-size" layer: odd square kernel, stride 1, padding `(k - 1) / 2`.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize, bias: bool, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("kernel size {kernel} is even")));
        }
        Ok(Conv2dLayer {
            weight: Tensor::create(&[out_ch, in_ch, kernel, kernel], Init::FanInGaussian(seed))?,
            bias: bias.then(|| Tensor::zeros(&[out_ch])),
            stride: 1,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let w = g.param(format!("{prefix}.weight"), self.weight.clone());
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param(format!("{prefix}.bias"), b.clone()));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}
