//! Parametric stick-skeleton renderer with a known age-generating function.
//!
//! Each sample's age is mapped to `u ∈ [0, 1]` and mixed with two nuisance
//! draws into an upper-body state `s_up = w·u + (1−w)·n₁` and a lower-body
//! state `s_lo = (1−w)·u + w·n₂`, where `w` is `upper_signal_weight`. The
//! upper state drives skull size, rib spacing and the brightness of every bone
//! pixel in the top half of the canvas; the lower state drives leg thickness,
//! knee size and bone brightness in the bottom half. A soft-tissue silhouette
//! of fixed brightness gives per-image normalization a reference level.
//! Gender changes pelvis and shoulder width and shifts the brightness curve.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{Gender, Manifest, Sample};
use super::pgm::GrayImage;
use crate::error::{Error, Result};
use crate::{par, rng};

pub const AGE_MIN: f64 = 8.0 / 12.0;
pub const AGE_MAX: f64 = 87.0;

/// Age bands `[0.67, 40)`, `[40, 61)`, `[61, 87]`.
pub const AGE_BANDS: [(f64, f64); 3] = [(AGE_MIN, 40.0), (40.0, 61.0), (61.0, AGE_MAX)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenParams {
    pub n: usize,
    pub female_fraction: f64,
    /// Probability mass of each entry of [`AGE_BANDS`].
    pub band_weights: [f64; 3],
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub upper_signal_weight: f64,
    /// Standard deviation of the additive pixel noise, in grey levels.
    pub noise_std: f64,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            n: 813,
            female_fraction: 679.0 / 813.0,
            band_weights: [0.08487, 0.73432, 0.18081],
            height: 192,
            width: 64,
            seed: 42,
            upper_signal_weight: 0.8,
            noise_std: 6.0,
        }
    }
}

impl GenParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 {
            return Err(Error::TooFewSamples(self.n));
        }
        if !(0.0..=1.0).contains(&self.female_fraction) {
            return bad(format!("female_fraction {} not in [0, 1]", self.female_fraction));
        }
        let total: f64 = self.band_weights.iter().sum();
        if self.band_weights.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad(format!("band weights {:?} must be >= 0 and sum to 1", self.band_weights));
        }
        if !(self.upper_signal_weight > 0.0 && self.upper_signal_weight < 1.0) {
            return bad(format!(
                "upper_signal_weight {} not in (0, 1)",
                self.upper_signal_weight
            ));
        }
        if self.height < 16 || self.width < 8 {
            return bad(format!("canvas {}x{} too small", self.height, self.width));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        Ok(())
    }

    /// Samples per age band: largest-remainder rounding of `n · weight`.
    pub fn band_counts(&self) -> [usize; 3] {
        largest_remainder(self.n, &self.band_weights)
    }

    pub fn female_count(&self) -> usize {
        (self.n as f64 * self.female_fraction).round() as usize
    }
}

fn largest_remainder(n: usize, weights: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Ages and genders for all samples, before rendering.
fn draw_labels(p: &GenParams) -> Vec<(f64, Gender)> {
    let mut r = rng::stream(p.seed, &[0x1abe1]);
    let mut bands: Vec<usize> = p
        .band_counts()
        .iter()
        .enumerate()
        .flat_map(|(b, &c)| std::iter::repeat_n(b, c))
        .collect();
    bands.shuffle(&mut r);
    let females = p.female_count();
    let mut genders: Vec<Gender> = (0..p.n)
        .map(|i| if i < females { Gender::Female } else { Gender::Male })
        .collect();
    genders.shuffle(&mut r);
    bands
        .into_iter()
        .zip(genders)
        .map(|(b, g)| {
            let (lo, hi) = AGE_BANDS[b];
            let age: f64 = r.random_range(lo..hi);
            // The manifest stores four decimals; keep memory and disk equal.
            ((age * 1e4).round() / 1e4, g)
        })
        .collect()
}

/// Renders every sample in memory. Sample `i` depends only on
/// `(seed, i)` and its label, so the output is independent of thread count.
pub fn generate_samples(p: &GenParams) -> Result<Vec<Sample>> {
    p.validate()?;
    let labels = draw_labels(p);
    Ok(par::map_range(p.n, |i| {
        let (age, gender) = labels[i];
        let mut r = rng::stream(p.seed, &[1, i as u64]);
        Sample {
            id: i as u32,
            image: render(age, gender, p, &mut r),
            age_years: age,
            gender,
        }
    }))
}

/// Renders the dataset and writes `images/NNNNN.pgm` plus `manifest.csv`
/// under `out_dir`.
pub fn generate(p: &GenParams, out_dir: &Path) -> Result<Manifest> {
    let samples = generate_samples(p)?;
    Manifest::write_dataset(&samples, out_dir)
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn sy(&self, y: f64) -> f64 {
        y * self.h as f64
    }

    fn sx(&self, x: f64) -> f64 {
        x * self.w as f64
    }

    /// Pixel scale relative to the reference 192-row canvas.
    fn unit(&self) -> f64 {
        self.h as f64 / 192.0
    }

    fn bbox(&self, y0: f64, y1: f64, x0: f64, x1: f64) -> (usize, usize, usize, usize) {
        let clamp = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
        (
            clamp(y0.floor(), self.h),
            clamp(y1.ceil() + 1.0, self.h),
            clamp(x0.floor(), self.w),
            clamp(x1.ceil() + 1.0, self.w),
        )
    }

    fn paint(&mut self, y: usize, x: usize, v: f64) {
        let p = &mut self.px[y * self.w + x];
        *p = p.max(v);
    }

    fn fill_rect(&mut self, y0: f64, y1: f64, x0: f64, x1: f64, v: f64) {
        let (ya, yb, xa, xb) = self.bbox(self.sy(y0), self.sy(y1) - 1.0, self.sx(x0), self.sx(x1) - 1.0);
        for y in ya..yb {
            for x in xa..xb {
                self.paint(y, x, v);
            }
        }
    }

    /// Filled ellipse (`thickness = None`) or ring, centre/radii in
    /// normalized units.
    fn ellipse(&mut self, cy: f64, cx: f64, ry: f64, rx: f64, thickness: Option<f64>, v: &dyn Fn(usize) -> f64) {
        let (cy, cx, ry, rx) = (self.sy(cy), self.sx(cx), self.sy(ry), self.sx(rx));
        let (ya, yb, xa, xb) = self.bbox(cy - ry - 2.0, cy + ry + 2.0, cx - rx - 2.0, cx + rx + 2.0);
        for y in ya..yb {
            for x in xa..xb {
                let (dy, dx) = ((y as f64 + 0.5 - cy) / ry, (x as f64 + 0.5 - cx) / rx);
                let r = (dy * dy + dx * dx).sqrt();
                let inside = match thickness {
                    None => r <= 1.0,
                    Some(t) => (r - 1.0).abs() * ry.min(rx) <= t / 2.0,
                };
                if inside {
                    self.paint(y, x, v(y));
                }
            }
        }
    }

    /// Thick segment between two normalized points.
    fn line(&mut self, a: (f64, f64), b: (f64, f64), thickness: f64, v: &dyn Fn(usize) -> f64) {
        let (ay, ax, by, bx) = (self.sy(a.0), self.sx(a.1), self.sy(b.0), self.sx(b.1));
        let half = thickness / 2.0;
        let (ya, yb, xa, xb) = self.bbox(ay.min(by) - half, ay.max(by) + half, ax.min(bx) - half, ax.max(bx) + half);
        let (dy, dx) = (by - ay, bx - ax);
        let len2 = (dy * dy + dx * dx).max(1e-12);
        for y in ya..yb {
            for x in xa..xb {
                let (py, pxx) = (y as f64 + 0.5, x as f64 + 0.5);
                let t = (((py - ay) * dy + (pxx - ax) * dx) / len2).clamp(0.0, 1.0);
                let (qy, qx) = (ay + t * dy - py, ax + t * dx - pxx);
                if qy * qy + qx * qx <= half * half {
                    self.paint(y, x, v(y));
                }
            }
        }
    }
}

const SOFT_TISSUE: f64 = 50.0;

/// Bone brightness for a maturity state `s ∈ [0, 1]`.
fn bone_level(s: f64, gender: Gender) -> f64 {
    match gender {
        Gender::Female => 235.0 - 120.0 * s,
        Gender::Male => 215.0 - 95.0 * s,
    }
}

fn render(age: f64, gender: Gender, p: &GenParams, r: &mut rng::Rng) -> GrayImage {
    let u = ((age - AGE_MIN) / (AGE_MAX - AGE_MIN)).clamp(0.0, 1.0);
    let w = p.upper_signal_weight;
    let (n1, n2): (f64, f64) = (r.random(), r.random());
    let s_up = w * u + (1.0 - w) * n1;
    let s_lo = (1.0 - w) * u + w * n2;
    let gain: f64 = r.random_range(0.85..1.15);

    let mut c = Canvas {
        h: p.height,
        w: p.width,
        px: vec![0.0; p.height * p.width],
    };
    let unit = c.unit();
    let mid_row = p.height / 2;
    let (upper, lower) = (bone_level(s_up, gender), bone_level(s_lo, gender));
    let bone = move |y: usize| if y < mid_row { upper } else { lower };
    let tissue = |_: usize| SOFT_TISSUE;

    let (shoulder, pelvis) = match gender {
        Gender::Female => (0.29, 0.26),
        Gender::Male => (0.34, 0.20),
    };

    // Soft tissue.
    c.ellipse(0.10, 0.5, 0.095, 0.30, None, &tissue);
    c.fill_rect(0.19, 0.58, 0.5 - shoulder - 0.05, 0.5 + shoulder + 0.05, SOFT_TISSUE);
    c.fill_rect(0.58, 0.99, 0.25, 0.75, SOFT_TISSUE);

    // Skull shrinks relative to the torso with age.
    let skull_ry = 0.075 * (1.15 - 0.3 * s_up);
    let skull_rx = skull_ry * 0.8 * p.height as f64 / p.width as f64;
    c.ellipse(0.10, 0.5, skull_ry, skull_rx, Some(2.5 * unit), &bone);

    // Clavicles, spine.
    c.line((0.20, 0.5 - shoulder), (0.20, 0.5 + shoulder), 2.0 * unit, &bone);
    c.line((0.19, 0.5), (0.58, 0.5), 3.0 * unit, &bone);

    // Ribs spread apart with age.
    let gap = 0.022 + 0.018 * s_up;
    let mut y = 0.23;
    while y < 0.46 {
        for side in [-1.0, 1.0] {
            c.line((y, 0.5), (y + 0.025, 0.5 + side * 0.26), 1.6 * unit, &bone);
        }
        y += gap;
    }

    // Arms.
    for side in [-1.0, 1.0] {
        let sx = 0.5 + side * shoulder;
        let elbow = (0.42, sx + side * 0.03);
        c.line((0.20, sx), elbow, 2.5 * unit, &bone);
        c.line(elbow, (0.62, sx + side * 0.02), 2.2 * unit, &bone);
    }

    // Pelvis.
    c.line((0.56, 0.5 - pelvis), (0.56, 0.5 + pelvis), 2.5 * unit, &bone);
    for side in [-1.0, 1.0] {
        c.line((0.56, 0.5 + side * pelvis), (0.63, 0.5 + side * 0.05), 2.5 * unit, &bone);
    }

    // Legs thicken and knees widen with the lower-body state.
    let leg_t = (3.0 + 2.0 * s_lo) * unit;
    for side in [-1.0, 1.0] {
        let hip = (0.63, 0.5 + side * 0.10);
        let knee = (0.80, 0.5 + side * 0.11);
        c.line(hip, knee, leg_t, &bone);
        c.line(knee, (0.98, 0.5 + side * 0.11), leg_t * 0.9, &bone);
        let kr = 0.010 + 0.010 * s_lo;
        c.ellipse(knee.0, knee.1, kr, kr * p.height as f64 / p.width as f64, None, &bone);
    }

    let noise = Normal::new(0.0, p.noise_std.max(1e-12)).expect("finite std");
    let data = c
        .px
        .iter()
        .map(|&v| {
            let n = if p.noise_std > 0.0 { noise.sample(r) } else { 0.0 };
            (v * gain + n).round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage::from_raw(p.width, p.height, data).expect("canvas size")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GenParams {
        GenParams {
            n,
            ..GenParams::default()
        }
    }

    #[test]
    fn default_counts() {
        let p = GenParams::default();
        assert_eq!(p.band_counts(), [69, 597, 147]);
        assert_eq!(p.female_count(), 679);
    }

    #[test]
    fn largest_remainder_sums_to_n() {
        for n in [2, 3, 10, 57, 813, 1000] {
            let c = largest_remainder(n, &GenParams::default().band_weights);
            assert_eq!(c.iter().sum::<usize>(), n);
        }
    }

    #[test]
    fn labels_respect_bands_and_range() {
        let p = GenParams::default();
        let labels = draw_labels(&p);
        let mut tally = [0usize; 3];
        for (age, _) in &labels {
            assert!((AGE_MIN..=AGE_MAX).contains(age), "{age}");
            let band = AGE_BANDS.iter().position(|(lo, hi)| age >= lo && age < hi).unwrap_or(2);
            tally[band] += 1;
        }
        assert_eq!(tally, [69, 597, 147]);
        let females = labels.iter().filter(|(_, g)| *g == Gender::Female).count();
        assert_eq!(females, 679);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = generate_samples(&small(6)).unwrap();
        let b = generate_samples(&small(6)).unwrap();
        assert_eq!(a, b);
        assert_eq!((a[0].image.width, a[0].image.height), (64, 192));
    }

    #[test]
    fn older_means_darker_upper_bones() {
        let p = GenParams {
            noise_std: 0.0,
            ..GenParams::default()
        };
        let mut r = rng::stream(0, &[]);
        let young = render(5.0, Gender::Female, &p, &mut r);
        let mut r = rng::stream(0, &[]);
        let old = render(80.0, Gender::Female, &p, &mut r);
        let max_top = |img: &GrayImage| *img.data[..img.width * img.height / 2].iter().max().unwrap();
        assert!(max_top(&young) > max_top(&old));
    }

    #[test]
    fn validation() {
        assert!(matches!(small(1).validate(), Err(Error::TooFewSamples(1))));
        let mut p = small(10);
        p.upper_signal_weight = 1.0;
        assert!(p.validate().is_err());
        let mut p = small(10);
        p.band_weights = [0.5, 0.5, 0.5];
        assert!(p.validate().is_err());
    }
}
