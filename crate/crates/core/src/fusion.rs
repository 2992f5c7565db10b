//! Late fusion (averaging member predictions) and early fusion (a fresh
//! regression head over the concatenated member feature vectors).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::layers::{BatchStats, DropoutLayer, LinearLayer, Mode};
use crate::model::{run_head, seed_for, ForwardOptions, ForwardOutput, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{Checkpoint, Regressor};
use crate::{par, rng};

/// Elementwise mean of two or more equally shaped prediction tensors.
pub fn late_fuse(predictions: &[Tensor]) -> Result<Tensor> {
    if predictions.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "late fusion needs at least 2 members, got {}",
            predictions.len()
        )));
    }
    let shape = predictions[0].shape();
    if let Some(p) = predictions.iter().find(|p| p.shape() != shape) {
        return Err(Error::shape(format!("fusing {shape:?} with {:?}", p.shape())));
    }
    // Averaging offsets from the first member keeps k identical members
    // bitwise unchanged, which a plain sum / k does not.
    let k = predictions.len() as f64;
    let data = (0..predictions[0].len())
        .map(|i| {
            let base = predictions[0].data()[i];
            base + predictions.iter().map(|p| p.data()[i] - base).sum::<f64>() / k
        })
        .collect();
    Tensor::from_vec(shape, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Early,
    Late,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberRef {
    pub path: PathBuf,
    /// Hex SHA-256 config fingerprint read from the checkpoint.
    pub fingerprint: String,
}

/// JSON description of an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ensemble {
    pub mode: FusionMode,
    pub members: Vec<MemberRef>,
    /// Trained fused-head checkpoint (early fusion only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_checkpoint: Option<PathBuf>,
}

impl Ensemble {
    pub fn validate(&self) -> Result<()> {
        if self.members.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "an ensemble needs at least 2 members, got {}",
                self.members.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let e: Ensemble = serde_json::from_str(text).map_err(|e| Error::Format(format!("ensemble: {e}")))?;
        e.validate()?;
        Ok(e)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Several backbones feeding one regression head. Each member runs up to its
/// concatenation layer; the member feature vectors are concatenated in
/// member order.
#[derive(Debug, Clone)]
pub struct FusedModel {
    members: Vec<Model>,
    head: [LinearLayer; 3],
    head_dims: [usize; 2],
    dropout_rate: f64,
    /// Train member weights too instead of treating them as fixed extractors.
    unfrozen: bool,
    target_mean: f64,
    target_std: f64,
}

/// Serializable description, stored in a fused checkpoint's metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedSpec {
    pub members: Vec<ModelConfig>,
    pub head_dims: [usize; 2],
    pub dropout_rate: f64,
    pub unfrozen: bool,
}

impl FusedModel {
    pub fn build(members: Vec<Model>, head_dims: [usize; 2], dropout_rate: f64, seed: u64) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::InvalidConfig("early fusion needs at least one member".into()))?;
        if let Some(m) = members.iter().find(|m| m.input_size() != first.input_size()) {
            return Err(Error::InvalidConfig(format!(
                "member input sizes differ: {} vs {}",
                first.input_size(),
                m.input_size()
            )));
        }
        if head_dims.contains(&0) {
            return Err(Error::InvalidConfig("head widths must be positive".into()));
        }
        DropoutLayer::new(dropout_rate, Mode::Eval, 0)?;
        let width: usize = members.iter().map(|m| m.config().feature_width()).sum();
        let dims = [width, head_dims[0], head_dims[1], 1];
        let fc = |i: usize| LinearLayer::new(dims[i], dims[i + 1], seed_for(seed, &format!("head.fc{}.weight", i + 1)));
        Ok(FusedModel {
            members,
            head: [fc(0)?, fc(1)?, fc(2)?],
            head_dims,
            dropout_rate,
            unfrozen: false,
            target_mean: 0.0,
            target_std: 1.0,
        })
    }

    pub fn with_unfrozen(mut self, on: bool) -> Self {
        self.unfrozen = on;
        self
    }

    pub fn members(&self) -> &[Model] {
        &self.members
    }

    pub fn spec(&self) -> FusedSpec {
        FusedSpec {
            members: self.members.iter().map(|m| m.config().clone()).collect(),
            head_dims: self.head_dims,
            dropout_rate: self.dropout_rate,
            unfrozen: self.unfrozen,
        }
    }

    pub fn feature_width(&self) -> usize {
        self.head[0].weight.shape()[1]
    }

    pub fn head_mut(&mut self) -> &mut [LinearLayer; 3] {
        &mut self.head
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        let head: usize = self.head.iter().map(LinearLayer::param_count).sum();
        if trainable_only && !self.unfrozen {
            return head;
        }
        head + self.members.iter().map(|m| m.count_params(trainable_only)).sum::<usize>()
    }

    /// Eval-mode concatenated member features, `[B, feature_width]`.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let out = self.forward_graph(&mut g, x, &ForwardOptions::eval())?;
        Ok(g.value(out.features).clone())
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.meta.get("kind").and_then(|k| k.as_str()) != Some("fused") {
            return Err(Error::Format("checkpoint does not hold a fused model".into()));
        }
        let spec: FusedSpec = serde_json::from_value(ckpt.meta["fused"].clone())
            .map_err(|e| Error::Format(format!("fused checkpoint metadata: {e}")))?;
        let members = spec.members.iter().map(|c| Model::build(c, 0)).collect::<Result<Vec<_>>>()?;
        let mut fused = FusedModel::build(members, spec.head_dims, spec.dropout_rate, 0)?.with_unfrozen(spec.unfrozen);
        let map = ckpt.tensor_map();
        let expected = fused.named_tensors();
        if expected.len() != map.len() {
            return Err(Error::Format(format!("expected {} tensors, found {}", expected.len(), map.len())));
        }
        for (name, t) in &expected {
            match map.get(name) {
                Some(v) if v.shape() == t.shape() => {}
                _ => return Err(Error::Format(format!("missing or misshapen tensor {name}"))),
            }
        }
        for (i, m) in fused.members.iter_mut().enumerate() {
            let prefix = format!("member{i}.");
            let own = map
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|n| (n.to_string(), t.clone())))
                .collect();
            m.load_named(&own)?;
        }
        fused.visit_head_mut(&mut |n, t| *t = map[n].clone());
        fused.target_mean = map["target.mean"].item();
        fused.target_std = map["target.std"].item();
        Ok(fused)
    }

    fn visit_head_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, fc) in self.head.iter_mut().enumerate() {
            f(&format!("head.fc{}.weight", i + 1), &mut fc.weight);
            f(&format!("head.fc{}.bias", i + 1), &mut fc.bias);
        }
    }
}

fn member_index(name: &str) -> Option<(usize, &str)> {
    let rest = name.strip_prefix("member")?;
    let (i, inner) = rest.split_once('.')?;
    Some((i.parse().ok()?, inner))
}

impl Regressor for FusedModel {
    fn input_size(&self) -> usize {
        self.members[0].input_size()
    }

    fn forward_graph(&self, g: &mut Graph, x: NodeId, opts: &ForwardOptions) -> Result<ForwardOutput> {
        let mut parts = Vec::with_capacity(self.members.len());
        let mut bn_stats = Vec::new();
        if self.unfrozen {
            for (i, m) in self.members.iter().enumerate() {
                let scope = format!("member{i}");
                g.set_scope(Some(&scope));
                let member_opts = ForwardOptions {
                    dropout_seed: rng::derive_seed(opts.dropout_seed, &[1 + i as u64]),
                    offset: None,
                    ..*opts
                };
                let out = m.forward_graph(g, x, &member_opts);
                g.set_scope(None);
                let out = out?;
                parts.push(out.features);
                bn_stats.extend(out.bn_stats.into_iter().map(|(n, s)| (format!("{scope}.{n}"), s)));
            }
        } else {
            let input = g.value(x).clone();
            let feats = par::map_slice(&self.members, |m| m.features(&input));
            for f in feats {
                parts.push(g.constant(f?));
            }
        }
        let features = if parts.len() == 1 { parts[0] } else { g.concat(&parts, 1)? };
        let mut idx = 0u64;
        let mut dropout = |g: &mut Graph, h: NodeId| -> Result<NodeId> {
            let seed = rng::derive_seed(opts.dropout_seed, &[0, idx]);
            idx += 1;
            DropoutLayer::new(self.dropout_rate, opts.mode, seed)?.forward(g, h)
        };
        let output = run_head(&self.head, g, features, &mut dropout, self.target_mean, self.target_std)?;
        Ok(ForwardOutput {
            output,
            features,
            taps: Default::default(),
            bn_stats,
        })
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, m) in self.members.iter_mut().enumerate() {
            m.visit_params_mut(&mut |n, t| f(&format!("member{i}.{n}"), t));
        }
        self.visit_head_mut(f);
    }

    fn is_trainable(&self, name: &str) -> bool {
        match member_index(name) {
            Some((i, inner)) => self.unfrozen && self.members.get(i).is_some_and(|m| m.is_trainable(inner)),
            None => name.starts_with("head."),
        }
    }

    fn apply_bn_stats(&mut self, stats: &[(String, BatchStats)]) {
        for (i, m) in self.members.iter_mut().enumerate() {
            let own: Vec<(String, BatchStats)> = stats
                .iter()
                .filter_map(|(n, s)| match member_index(n) {
                    Some((j, inner)) if j == i => Some((inner.to_string(), s.clone())),
                    _ => None,
                })
                .collect();
            m.apply_bn_stats(&own);
        }
    }

    fn set_target_scale(&mut self, mean: f64, std: f64) {
        self.target_mean = mean as f32 as f64;
        self.target_std = (std as f32 as f64).max(f32::EPSILON as f64);
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, m) in self.members.iter().enumerate() {
            out.extend(m.named_tensors().into_iter().map(|(n, t)| (format!("member{i}.{n}"), t)));
        }
        for (i, fc) in self.head.iter().enumerate() {
            out.push((format!("head.fc{}.weight", i + 1), fc.weight.clone()));
            out.push((format!("head.fc{}.bias", i + 1), fc.bias.clone()));
        }
        out.push(("target.mean".into(), Tensor::scalar(self.target_mean)));
        out.push(("target.std".into(), Tensor::scalar(self.target_std)));
        out
    }
}
