//! Grad-CAM for the age regressor and region-mass statistics over the
//! resulting heatmaps.

use std::path::Path;

use crate::data::augment::resize_bilinear;
use crate::data::{pgm, GrayImage, Region};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{ForwardOptions, Model};
use crate::tensor::Tensor;

/// Block 4's max-pool output, one of the connection taps.
pub const DEFAULT_LAYER: &str = "block4.pool";

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub layer: String,
    /// Channel weights: spatial means of `∂age/∂A_k`.
    pub alphas: Vec<f64>,
    /// `ReLU(Σ_k α_k A_k)` at the layer's `height × width`, max-normalized.
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    /// `values` bilinearly upsampled to `size × size`, max-normalized.
    pub upsampled: Vec<f64>,
    pub size: usize,
}

impl Heatmap {
    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

fn as_single(image: &Tensor, side: usize) -> Result<Tensor> {
    if image.len() != side * side || !matches!(image.shape(), [1, 1, _, _] | [1, _, _] | [_, _]) {
        return Err(Error::shape(format!(
            "grad-cam expects one {side}×{side} image, got {:?}",
            image.shape()
        )));
    }
    image.reshaped(&[1, 1, side, side])
}

fn normalize_max(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

pub fn grad_cam(model: &Model, image: &Tensor, layer: &str) -> Result<Heatmap> {
    let side = model.input_size();
    let x = as_single(image, side)?;
    let mut g = Graph::new();
    let xn = g.constant(x);
    let out = model.forward_graph(&mut g, xn, &ForwardOptions::eval())?;
    let &tap = out
        .taps
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let age = g.reduce_mean(out.output);
    let grads = g.backward(age)?;

    let shape = g.shape(tap).to_vec();
    let (k, h, w) = (shape[1], shape[2], shape[3]);
    let a = g.value(tap).data();
    let zero = Tensor::zeros(&shape);
    let da = grads.get(tap).unwrap_or(&zero).data();
    let hw = h * w;
    let alphas: Vec<f64> = (0..k)
        .map(|c| da[c * hw..(c + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    let mut values = vec![0.0; hw];
    for (c, alpha) in alphas.iter().enumerate() {
        for (v, &ac) in values.iter_mut().zip(&a[c * hw..(c + 1) * hw]) {
            *v += alpha * ac;
        }
    }
    values.iter_mut().for_each(|v| *v = v.max(0.0));
    normalize_max(&mut values);
    if h != w {
        return Err(Error::shape(format!("non-square activation {h}×{w}")));
    }
    let mut upsampled = resize_bilinear(&values, h, side);
    normalize_max(&mut upsampled);
    Ok(Heatmap {
        layer: layer.to_string(),
        alphas,
        values,
        height: h,
        width: w,
        upsampled,
        size: side,
    })
}

/// Finite-difference estimate of `α_k`: the change in predicted age when
/// every activation of channel `k` at `layer` moves by `±eps`, divided by
/// `2·eps·h·w`.
pub fn channel_sensitivity(model: &Model, image: &Tensor, layer: &str, channel: usize, eps: f64) -> Result<f64> {
    let side = model.input_size();
    let x = as_single(image, side)?;
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = model.forward_graph(&mut g, xn, &ForwardOptions::eval())?;
    let &tap = out
        .taps
        .get(layer)
        .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
    let shape = g.shape(tap).to_vec();
    if channel >= shape[1] {
        return Err(Error::shape(format!("channel {channel} of {}", shape[1])));
    }
    let hw = shape[2] * shape[3];
    let age_with = |delta: f64| -> Result<f64> {
        let mut offset = Tensor::zeros(&shape);
        offset.data_mut()[channel * hw..(channel + 1) * hw].fill(delta);
        let opts = ForwardOptions {
            offset: Some((layer, &offset)),
            ..ForwardOptions::eval()
        };
        Ok(model.forward(&x, &opts)?.item())
    };
    Ok((age_with(eps)? - age_with(-eps)?) / (2.0 * eps * hw as f64))
}

/// Fraction of upsampled heatmap mass in the top (`Upper`) or bottom
/// (`Lower`) half of the rows; `Full` is 1.
pub fn region_mass(h: &Heatmap, region: Region) -> Result<f64> {
    let total: f64 = h.upsampled.iter().sum();
    if total <= 0.0 {
        return Err(Error::Undefined);
    }
    let mid = h.size / 2 * h.size;
    let upper: f64 = h.upsampled[..mid].iter().sum();
    Ok(match region {
        Region::Full => 1.0,
        Region::Upper => upper / total,
        Region::Lower => 1.0 - upper / total,
    })
}

pub fn to_image(h: &Heatmap) -> GrayImage {
    let data = h.upsampled.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    GrayImage::from_raw(h.size, h.size, data).expect("square heatmap")
}

pub fn export(h: &Heatmap, path: impl AsRef<Path>) -> Result<()> {
    pgm::save(&to_image(h), path)
}

/// `image_id,upper_mass,lower_mass`; undefined masses print as `undefined`.
pub fn mass_csv(rows: &[(u32, Result<(f64, f64)>)]) -> String {
    let mut s = String::from("image_id,upper_mass,lower_mass\n");
    for (id, m) in rows {
        match m {
            Ok((u, l)) => s.push_str(&format!("{id},{u:.6},{l:.6}\n")),
            Err(_) => s.push_str(&format!("{id},undefined,undefined\n")),
        }
    }
    s
}
