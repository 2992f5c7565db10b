//! VGG-style backbone with hierarchical connections.
//!
//! Five blocks of `convs_per_block × (3×3 conv → batch norm → ReLU)` each end
//! in a 2×2 max pool. Selected intermediate pool outputs ("connections") are
//! flattened (or globally average-pooled) and squeezed through an `n_units`
//! FC bottleneck; the block-5 pool output is flattened as the global feature
//! vector. Global and connection features are concatenated and regressed by
//! three FC layers ending in a single linear unit.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchNormLayer, BatchStats, Conv2dLayer, DropoutLayer, LinearLayer, Mode};
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_BLOCKS: usize = 5;
const KERNEL: usize = 3;

/// Learnable parameters of one connection: a dense layer from a `C×H×W`
/// feature map to `n_units` units plus its bias.
pub fn connection_param_count(c: usize, h: usize, w: usize, n_units: usize) -> usize {
    c * h * w * n_units + n_units
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Side of the square network input; must be divisible by 2^5.
    pub input_size: usize,
    pub block_channels: [usize; NUM_BLOCKS],
    pub convs_per_block: usize,
    /// 1-based block indices whose max-pool output feeds a connection.
    pub connection_blocks: Vec<usize>,
    /// Permit connections from blocks 1 and 2.
    pub allow_early_connections: bool,
    pub n_units: usize,
    pub head_dims: [usize; 2],
    pub dropout_rate: f64,
    pub global_pool_connections: bool,
    pub frozen_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            block_channels: [16, 32, 64, 128, 128],
            convs_per_block: 2,
            connection_blocks: vec![3, 4],
            allow_early_connections: false,
            n_units: 64,
            head_dims: [128, 64],
            dropout_rate: 0.5,
            global_pool_connections: false,
            frozen_blocks: 0,
        }
    }
}

/// Which model family to build from a config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// With the configured connections.
    Hier,
    /// Backbone and head only.
    Plain,
}

impl ModelConfig {
    /// 224-pixel input, VGG-16 channel widths and 256-unit bottlenecks.
    pub fn vgg16_scale() -> Self {
        ModelConfig {
            input_size: 224,
            block_channels: [64, 128, 256, 512, 512],
            n_units: 256,
            ..Self::default()
        }
    }

    pub fn with_arch(&self, arch: Arch) -> Self {
        let mut c = self.clone();
        if arch == Arch::Plain {
            c.connection_blocks.clear();
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(1 << NUM_BLOCKS) {
            return bad(format!(
                "input_size {} is not a positive multiple of {}",
                self.input_size,
                1 << NUM_BLOCKS
            ));
        }
        if self.block_channels.contains(&0) || self.convs_per_block == 0 || self.n_units == 0 {
            return bad("channel counts, convs_per_block and n_units must be >= 1".into());
        }
        if self.head_dims.contains(&0) {
            return bad("head widths must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.frozen_blocks > NUM_BLOCKS {
            return bad(format!("frozen_blocks {} > {NUM_BLOCKS}", self.frozen_blocks));
        }
        let mut seen = [false; NUM_BLOCKS + 1];
        for &b in &self.connection_blocks {
            if !(1..NUM_BLOCKS).contains(&b) {
                return bad(format!("connection block {b} not in 1..=4"));
            }
            if b <= 2 && !self.allow_early_connections {
                return bad(format!(
                    "connection from block {b} needs allow_early_connections"
                ));
            }
            if std::mem::replace(&mut seen[b], true) {
                return bad(format!("duplicate connection block {b}"));
            }
        }
        Ok(())
    }

    /// `(C, H, W)` of block `b`'s max-pool output.
    pub fn pool_shape(&self, block: usize) -> (usize, usize, usize) {
        let side = self.input_size >> block;
        (self.block_channels[block - 1], side, side)
    }

    /// Flattened width of the connection input for block `b`.
    fn connection_in(&self, block: usize) -> usize {
        let (c, h, w) = self.pool_shape(block);
        if self.global_pool_connections {
            c
        } else {
            c * h * w
        }
    }

    pub fn global_width(&self) -> usize {
        let (c, h, w) = self.pool_shape(NUM_BLOCKS);
        c * h * w
    }

    /// Width of the concatenated feature vector entering the head.
    pub fn feature_width(&self) -> usize {
        self.global_width() + self.connection_blocks.len() * self.n_units
    }

    /// All tensors a model built from this config owns, without allocating
    /// them. The order matches [`Model::registry`].
    pub fn registry(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        let mut in_ch = 1;
        for b in 1..=NUM_BLOCKS {
            let ch = self.block_channels[b - 1];
            for j in 1..=self.convs_per_block {
                out.push(ParamSpec::new(format!("block{b}.conv{j}.weight"), &[ch, in_ch, KERNEL, KERNEL], ParamKind::Weight));
                out.push(ParamSpec::new(format!("block{b}.bn{j}.gamma"), &[ch], ParamKind::Scale));
                out.push(ParamSpec::new(format!("block{b}.bn{j}.beta"), &[ch], ParamKind::Bias));
                in_ch = ch;
            }
        }
        for &b in &self.connection_blocks {
            let fin = self.connection_in(b);
            out.push(ParamSpec::new(format!("conn.block{b}.fc.weight"), &[self.n_units, fin], ParamKind::Weight));
            out.push(ParamSpec::new(format!("conn.block{b}.fc.bias"), &[self.n_units], ParamKind::Bias));
        }
        let dims = [self.feature_width(), self.head_dims[0], self.head_dims[1], 1];
        for i in 0..3 {
            out.push(ParamSpec::new(format!("head.fc{}.weight", i + 1), &[dims[i + 1], dims[i]], ParamKind::Weight));
            out.push(ParamSpec::new(format!("head.fc{}.bias", i + 1), &[dims[i + 1]], ParamKind::Bias));
        }
        for b in 1..=NUM_BLOCKS {
            let ch = self.block_channels[b - 1];
            for j in 1..=self.convs_per_block {
                out.push(ParamSpec::new(format!("block{b}.bn{j}.running_mean"), &[ch], ParamKind::Buffer));
                out.push(ParamSpec::new(format!("block{b}.bn{j}.running_var"), &[ch], ParamKind::Buffer));
            }
        }
        out.push(ParamSpec::new("target.mean".into(), &[1], ParamKind::Buffer));
        out.push(ParamSpec::new("target.std".into(), &[1], ParamKind::Buffer));
        out
    }

    /// Learnable parameter count (buffers excluded); `trainable_only` also
    /// drops the frozen blocks.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.registry()
            .iter()
            .filter(|p| p.kind != ParamKind::Buffer)
            .filter(|p| !trainable_only || !is_frozen(&p.name, self.frozen_blocks))
            .map(|p| p.numel())
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    /// Non-learnable state (batch-norm running statistics, target scaling).
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize], kind: ParamKind) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
            kind,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Backbone block index (1-based) a parameter belongs to, if any.
pub fn block_of(name: &str) -> Option<usize> {
    let rest = name.strip_prefix("block")?;
    let end = rest.find('.')?;
    rest[..end].parse().ok()
}

pub(crate) fn is_frozen(name: &str, frozen_blocks: usize) -> bool {
    block_of(name).is_some_and(|b| b <= frozen_blocks)
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv2dLayer,
    bn: BatchNormLayer,
}

#[derive(Debug, Clone)]
struct Connection {
    block: usize,
    fc: LinearLayer,
}

/// Per-call forward settings.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Seeds every dropout mask drawn during this call.
    pub dropout_seed: u64,
    /// Adds a tensor to a named activation before the pass continues.
    pub offset: Option<(&'a str, &'a Tensor)>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout_seed: 0,
            offset: None,
        }
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions {
            mode: Mode::Train,
            dropout_seed,
            offset: None,
        }
    }
}

#[derive(Debug)]
pub struct ForwardOutput {
    /// Predicted ages, `[B, 1]`.
    pub output: NodeId,
    /// Concatenated global + connection features, `[B, feature_width]`.
    pub features: NodeId,
    /// Named activations: `block{b}.conv{j}` (post-ReLU) and `block{b}.pool`.
    pub taps: BTreeMap<String, NodeId>,
    /// Train-mode batch statistics keyed by batch-norm prefix.
    pub bn_stats: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    blocks: Vec<Vec<ConvUnit>>,
    connections: Vec<Connection>,
    head: [LinearLayer; 3],
    /// Ages are predicted as `mean + std · raw`; set from training targets.
    target_mean: f64,
    target_std: f64,
}

pub(crate) fn seed_for(seed: u64, name: &str) -> u64 {
    rng::derive_seed(seed, &[rng::name_key(name)])
}

impl Model {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut in_ch = 1;
        for b in 1..=NUM_BLOCKS {
            let ch = config.block_channels[b - 1];
            let units = (1..=config.convs_per_block)
                .map(|j| {
                    let conv = Conv2dLayer::same(
                        in_ch,
                        ch,
                        KERNEL,
                        false,
                        seed_for(seed, &format!("block{b}.conv{j}.weight")),
                    )?;
                    in_ch = ch;
                    Ok(ConvUnit {
                        conv,
                        bn: BatchNormLayer::new(ch),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(units);
        }
        let connections = config
            .connection_blocks
            .iter()
            .map(|&b| {
                Ok(Connection {
                    block: b,
                    fc: LinearLayer::new(
                        config.connection_in(b),
                        config.n_units,
                        seed_for(seed, &format!("conn.block{b}.fc.weight")),
                    )?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dims = [config.feature_width(), config.head_dims[0], config.head_dims[1], 1];
        let fc = |i: usize| {
            LinearLayer::new(dims[i], dims[i + 1], seed_for(seed, &format!("head.fc{}.weight", i + 1)))
        };
        Ok(Model {
            config: config.clone(),
            blocks,
            connections,
            head: [fc(0)?, fc(1)?, fc(2)?],
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_size(&self) -> usize {
        self.config.input_size
    }

    pub fn frozen_blocks(&self) -> usize {
        self.config.frozen_blocks
    }

    /// Excludes blocks `1..=k` from optimizer updates and freezes their
    /// batch-norm running statistics.
    pub fn freeze_blocks(mut self, k: usize) -> Result<Self> {
        if k > NUM_BLOCKS {
            return Err(Error::InvalidConfig(format!("cannot freeze {k} of {NUM_BLOCKS} blocks")));
        }
        self.config.frozen_blocks = k;
        Ok(self)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        !name.starts_with("target.")
            && !name.contains(".running_")
            && !is_frozen(name, self.config.frozen_blocks)
    }

    pub fn target_scale(&self) -> (f64, f64) {
        (self.target_mean, self.target_std)
    }

    /// Sets the output affine map. Values are rounded to `f32` so a
    /// checkpoint reproduces them exactly.
    pub fn set_target_scale(&mut self, mean: f64, std: f64) {
        self.target_mean = mean as f32 as f64;
        self.target_std = (std as f32 as f64).max(f32::EPSILON as f64);
    }

    /// Visits learnable parameters in registry order.
    pub fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (b, units) in self.blocks.iter().enumerate() {
            for (j, u) in units.iter().enumerate() {
                let (b, j) = (b + 1, j + 1);
                f(&format!("block{b}.conv{j}.weight"), &u.conv.weight);
                f(&format!("block{b}.bn{j}.gamma"), &u.bn.gamma);
                f(&format!("block{b}.bn{j}.beta"), &u.bn.beta);
            }
        }
        for c in &self.connections {
            f(&format!("conn.block{}.fc.weight", c.block), &c.fc.weight);
            f(&format!("conn.block{}.fc.bias", c.block), &c.fc.bias);
        }
        for (i, fc) in self.head.iter().enumerate() {
            f(&format!("head.fc{}.weight", i + 1), &fc.weight);
            f(&format!("head.fc{}.bias", i + 1), &fc.bias);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (b, units) in self.blocks.iter_mut().enumerate() {
            for (j, u) in units.iter_mut().enumerate() {
                let (b, j) = (b + 1, j + 1);
                f(&format!("block{b}.conv{j}.weight"), &mut u.conv.weight);
                f(&format!("block{b}.bn{j}.gamma"), &mut u.bn.gamma);
                f(&format!("block{b}.bn{j}.beta"), &mut u.bn.beta);
            }
        }
        for c in &mut self.connections {
            f(&format!("conn.block{}.fc.weight", c.block), &mut c.fc.weight);
            f(&format!("conn.block{}.fc.bias", c.block), &mut c.fc.bias);
        }
        for (i, fc) in self.head.iter_mut().enumerate() {
            f(&format!("head.fc{}.weight", i + 1), &mut fc.weight);
            f(&format!("head.fc{}.bias", i + 1), &mut fc.bias);
        }
    }

    /// Every tensor the model owns (parameters then buffers), registry order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |n, t| out.push((n.to_string(), t.clone())));
        for (b, units) in self.blocks.iter().enumerate() {
            for (j, u) in units.iter().enumerate() {
                out.push((format!("block{}.bn{}.running_mean", b + 1, j + 1), u.bn.running_mean.clone()));
                out.push((format!("block{}.bn{}.running_var", b + 1, j + 1), u.bn.running_var.clone()));
            }
        }
        out.push(("target.mean".into(), Tensor::scalar(self.target_mean)));
        out.push(("target.std".into(), Tensor::scalar(self.target_std)));
        out
    }

    /// Replaces every tensor from `named`; names and shapes must match the
    /// registry exactly.
    pub fn load_named(&mut self, named: &BTreeMap<String, Tensor>) -> Result<()> {
        let registry = self.config.registry();
        if registry.len() != named.len() {
            return Err(Error::Format(format!(
                "expected {} tensors, found {}",
                registry.len(),
                named.len()
            )));
        }
        for spec in &registry {
            let t = named
                .get(&spec.name)
                .ok_or_else(|| Error::Format(format!("missing tensor {}", spec.name)))?;
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Format(format!(
                    "tensor {} has shape {:?}, expected {:?}",
                    spec.name,
                    t.shape(),
                    spec.shape
                )));
            }
        }
        self.visit_params_mut(&mut |n, t| *t = named[n].clone());
        for (b, units) in self.blocks.iter_mut().enumerate() {
            for (j, u) in units.iter_mut().enumerate() {
                u.bn.running_mean = named[&format!("block{}.bn{}.running_mean", b + 1, j + 1)].clone();
                u.bn.running_var = named[&format!("block{}.bn{}.running_var", b + 1, j + 1)].clone();
            }
        }
        self.target_mean = named["target.mean"].item();
        self.target_std = named["target.std"].item();
        Ok(())
    }

    /// Registry derived from the instantiated tensors.
    pub fn registry(&self) -> Vec<ParamSpec> {
        let spec = self.config.registry();
        let named = self.named_tensors();
        spec.into_iter()
            .zip(named)
            .map(|(s, (n, t))| {
                debug_assert_eq!(s.name, n);
                ParamSpec::new(n, t.shape(), s.kind)
            })
            .collect()
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        let mut total = 0;
        self.visit_params(&mut |n, t| {
            if !trainable_only || self.is_trainable(n) {
                total += t.len();
            }
        });
        total
    }

    /// Folds train-mode batch statistics into running estimates, skipping
    /// frozen blocks.
    pub fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (prefix, s) in stats {
            if is_frozen(prefix, self.config.frozen_blocks) {
                continue;
            }
            if let Some(bn) = self.bn_mut(prefix) {
                bn.update_running(s);
            }
        }
    }

    fn bn_mut(&mut self, prefix: &str) -> Option<&mut BatchNormLayer> {
        let b = block_of(prefix)?;
        let j: usize = prefix.rsplit(".bn").next()?.parse().ok()?;
        self.blocks.get_mut(b - 1)?.get_mut(j - 1).map(|u| &mut u.bn)
    }

    /// Records the forward pass of `x: [B, 1, S, S]` on `g`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        x: NodeId,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput> {
        let s = g.shape(x).to_vec();
        let side = self.config.input_size;
        if s.len() != 4 || s[1] != 1 || s[2] != side || s[3] != side {
            return Err(Error::shape(format!(
                "model expects [B, 1, {side}, {side}], got {s:?}"
            )));
        }
        let mut taps = BTreeMap::new();
        let mut bn_stats = Vec::new();
        let mut tap = |g: &mut Graph, name: String, id: NodeId| -> Result<NodeId> {
            let id = match opts.offset {
                Some((target, delta)) if target == name => {
                    let d = g.constant(delta.clone());
                    g.add(id, d)?
                }
                _ => id,
            };
            taps.insert(name, id);
            Ok(id)
        };

        let mut h = x;
        let mut pools = Vec::with_capacity(NUM_BLOCKS);
        for (bi, units) in self.blocks.iter().enumerate() {
            let b = bi + 1;
            let bn_mode = if opts.mode == Mode::Train && b > self.config.frozen_blocks {
                Mode::Train
            } else {
                Mode::Eval
            };
            for (ji, u) in units.iter().enumerate() {
                let j = ji + 1;
                h = u.conv.forward(g, &format!("block{b}.conv{j}"), h)?;
                let prefix = format!("block{b}.bn{j}");
                let (y, stats) = u.bn.apply(g, &prefix, h, bn_mode)?;
                if let Some(stats) = stats {
                    bn_stats.push((prefix, stats));
                }
                h = g.relu(y);
                h = tap(g, format!("block{b}.conv{j}"), h)?;
            }
            h = g.maxpool2d(h, 2, 2)?;
            h = tap(g, format!("block{b}.pool"), h)?;
            pools.push(h);
        }

        let mut dropout_idx = 0u64;
        let mut dropout = |g: &mut Graph, x: NodeId| -> Result<NodeId> {
            let seed = rng::derive_seed(opts.dropout_seed, &[dropout_idx]);
            dropout_idx += 1;
            DropoutLayer::new(self.config.dropout_rate, opts.mode, seed)?.forward(g, x)
        };

        let mut parts = vec![g.flatten(pools[NUM_BLOCKS - 1])?];
        for c in &self.connections {
            let src = pools[c.block - 1];
            let flat = if self.config.global_pool_connections {
                g.global_avg_pool(src)?
            } else {
                g.flatten(src)?
            };
            let y = c.fc.forward(g, &format!("conn.block{}.fc", c.block), flat)?;
            let y = g.relu(y);
            parts.push(dropout(g, y)?);
        }
        let features = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat(&parts, 1)?
        };
        let output = self.head_forward(g, features, &mut dropout)?;
        Ok(ForwardOutput {
            output,
            features,
            taps,
            bn_stats,
        })
    }

    fn head_forward(
        &self,
        g: &mut Graph,
        features: NodeId,
        dropout: &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>,
    ) -> Result<NodeId> {
        run_head(&self.head, g, features, dropout, self.target_mean, self.target_std)
    }

    /// Ages for `batch: [B, 1, S, S]` as a `[B, 1]` tensor.
    pub fn forward(&self, batch: &Tensor, opts: &ForwardOptions) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x, opts)?;
        Ok(g.value(out.output).clone())
    }

    /// Eval-mode prediction.
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(batch, &ForwardOptions::eval())?.into_data())
    }

    /// Eval-mode concatenated feature vectors, `[B, feature_width]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x, &ForwardOptions::eval())?;
        Ok(g.value(out.features).clone())
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for b in 1..=NUM_BLOCKS {
            for j in 1..=self.config.convs_per_block {
                names.push(format!("block{b}.conv{j}"));
            }
            names.push(format!("block{b}.pool"));
        }
        names
    }

    /// The three head layers, e.g. to zero them for attribution tests.
    pub fn head_mut(&mut self) -> &mut [LinearLayer; 3] {
        &mut self.head
    }
}

/// Three FC layers: `fc1 → ReLU → dropout → fc2 → ReLU → dropout → fc3`,
/// then the target affine map.
pub(crate) fn run_head(
    head: &[LinearLayer; 3],
    g: &mut Graph,
    features: NodeId,
    dropout: &mut dyn FnMut(&mut Graph, NodeId) -> Result<NodeId>,
    target_mean: f64,
    target_std: f64,
) -> Result<NodeId> {
    let mut h = features;
    for (i, fc) in head.iter().enumerate() {
        h = fc.forward(g, &format!("head.fc{}", i + 1), h)?;
        if i < 2 {
            h = g.relu(h);
            h = dropout(g, h)?;
        }
    }
    let h = g.mul_scalar(h, target_std)?;
    g.add_scalar(h, target_mean)
}
