//! Letterbox → bilinear resize → crop (+ flip) → per-image standardization.

use rand::Rng;

use super::pgm::GrayImage;
use crate::layers::Mode;
use crate::tensor::Tensor;

/// The resized image is this many pixels larger than the crop on each axis,
/// giving a `(MARGIN + 1)²` grid of crop offsets.
pub const CROP_MARGIN: usize = 8;
const STD_FLOOR: f64 = 1e-6;

/// An image letterboxed to a square and resized to `target + CROP_MARGIN`.
/// Deterministic, so it can be computed once per sample and reused across
/// epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub side: usize,
    pub data: Vec<f64>,
}

/// Pads the shorter axis symmetrically with zeros.
pub fn letterbox(image: &GrayImage) -> GrayImage {
    let side = image.width.max(image.height);
    let (oy, ox) = ((side - image.height) / 2, (side - image.width) / 2);
    let mut out = GrayImage::new(side, side);
    for y in 0..image.height {
        let src = &image.data[y * image.width..(y + 1) * image.width];
        out.data[(y + oy) * side + ox..][..image.width].copy_from_slice(src);
    }
    out
}

/// Bilinear resize of a square image, half-pixel centres, edge clamping.
pub fn resize_bilinear(src: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    let scale = in_side as f64 / out_side as f64;
    let coords: Vec<(usize, usize, f64)> = (0..out_side)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_side - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(in_side - 1);
            (lo, hi, s - lo as f64)
        })
        .collect();
    let mut out = Vec::with_capacity(out_side * out_side);
    for &(y0, y1, fy) in &coords {
        for &(x0, x1, fx) in &coords {
            let p = |y: usize, x: usize| src[y * in_side + x];
            let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
            let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

pub fn prepare(image: &GrayImage, target: usize) -> Prepared {
    let sq = letterbox(image);
    let src: Vec<f64> = sq.data.iter().map(|&v| v as f64).collect();
    let side = target + CROP_MARGIN;
    Prepared {
        side,
        data: resize_bilinear(&src, sq.width, side),
    }
}

/// Crop placement and mirroring for one draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CropParams {
    pub offset_y: usize,
    pub offset_x: usize,
    pub flip: bool,
}

impl CropParams {
    pub fn center() -> Self {
        CropParams {
            offset_y: CROP_MARGIN / 2,
            offset_x: CROP_MARGIN / 2,
            flip: false,
        }
    }

    pub fn random(r: &mut impl Rng) -> Self {
        CropParams {
            offset_y: r.random_range(0..=CROP_MARGIN),
            offset_x: r.random_range(0..=CROP_MARGIN),
            flip: r.random_bool(0.5),
        }
    }

    pub fn for_mode(mode: Mode, r: &mut impl Rng) -> Self {
        match mode {
            Mode::Train => Self::random(r),
            Mode::Eval => Self::center(),
        }
    }
}

/// Crops `target × target` at `p`, optionally mirrors, then standardizes to
/// zero mean and unit variance. Returns `[1, target, target]`.
pub fn crop(prepared: &Prepared, target: usize, p: CropParams) -> Tensor {
    let mut out = Vec::with_capacity(target * target);
    for y in 0..target {
        let row = &prepared.data[(y + p.offset_y) * prepared.side + p.offset_x..][..target];
        if p.flip {
            out.extend(row.iter().rev());
        } else {
            out.extend_from_slice(row);
        }
    }
    standardize(&mut out);
    Tensor::from_vec(&[1, target, target], out).expect("crop shape")
}

/// In-place `(x − mean) / max(std, 1e-6)`; a constant image becomes zeros.
pub fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

pub fn augment(image: &GrayImage, target: usize, mode: Mode, r: &mut impl Rng) -> Tensor {
    crop(&prepare(image, target), target, CropParams::for_mode(mode, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tall_image() -> GrayImage {
        let data = (0..192 * 64).map(|i| ((i * 31 + i / 64 * 7) % 251) as u8).collect();
        GrayImage::from_raw(64, 192, data).unwrap()
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let img = tall_image();
        let a = augment(&img, 32, Mode::Eval, &mut rng::stream(1, &[]));
        let b = augment(&img, 32, Mode::Eval, &mut rng::stream(2, &[]));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 32, 32]);
    }

    #[test]
    fn output_is_standardized() {
        let img = tall_image();
        for mode in [Mode::Train, Mode::Eval] {
            let t = augment(&img, 32, mode, &mut rng::stream(3, &[]));
            let mean = t.mean();
            let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / t.len() as f64;
            assert!(mean.abs() < 1e-6);
            assert!((var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = GrayImage::from_raw(8, 8, vec![77; 64]).unwrap();
        let t = augment(&img, 8, Mode::Eval, &mut rng::stream(0, &[]));
        assert!(t.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn crop_offsets_cover_grid() {
        let mut r = rng::stream(5, &[]);
        let mut seen = std::collections::HashSet::new();
        let mut flips = 0;
        for _ in 0..10_000 {
            let p = CropParams::random(&mut r);
            assert!(p.offset_x <= CROP_MARGIN && p.offset_y <= CROP_MARGIN);
            seen.insert((p.offset_y, p.offset_x));
            flips += p.flip as usize;
        }
        assert_eq!(seen.len(), (CROP_MARGIN + 1) * (CROP_MARGIN + 1));
        assert!((4500..5500).contains(&flips));
    }

    #[test]
    fn letterbox_centres_tall_image() {
        let img = GrayImage::from_raw(2, 4, vec![9; 8]).unwrap();
        let sq = letterbox(&img);
        assert_eq!((sq.width, sq.height), (4, 4));
        for y in 0..4 {
            assert_eq!(&sq.data[y * 4..y * 4 + 4], &[0, 9, 9, 0]);
        }
    }

    #[test]
    fn resize_preserves_constants_and_identity() {
        let c = vec![3.5; 100];
        assert!(resize_bilinear(&c, 10, 7).iter().all(|&v| (v - 3.5).abs() < 1e-12));
        let v: Vec<f64> = (0..16).map(|i| i as f64).collect();
        assert_eq!(resize_bilinear(&v, 4, 4), v);
    }

    #[test]
    fn flip_mirrors_rows() {
        let prepared = Prepared {
            side: 9,
            data: (0..81).map(|i| (i % 9) as f64).collect(),
        };
        let p = CropParams { offset_y: 0, offset_x: 0, flip: true };
        let t = crop(&prepared, 1, p);
        assert_eq!(t.shape(), &[1, 1, 1]);
        let a = crop(&prepared, 3, CropParams { offset_y: 0, offset_x: 0, flip: false });
        let b = crop(&prepared, 3, CropParams { offset_y: 0, offset_x: 0, flip: true });
        assert_eq!(&a.data()[..3], &[b.data()[2], b.data()[1], b.data()[0]]);
    }
}
