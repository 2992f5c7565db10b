//! Dense row-major `f64` tensors.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;

/// How to fill a freshly created tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Constant(f64),
    /// He initialization: `N(0, 2 / fan_in)` where fan-in is the product of
    /// all dimensions but the first, drawn from a stream keyed by the seed.
    FanInGaussian(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl Tensor {
    pub fn create(shape: &[usize], init: Init) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanInGaussian(seed) => {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                let mut r = rng::stream(seed, &[n as u64]);
                (0..n).map(|_| normal.sample(&mut r)).collect()
            }
        };
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::create(shape, Init::Zeros).expect("valid shape")
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(&self, new_shape: &[usize]) -> Result<Self> {
        check_shape(new_shape)?;
        let n: usize = new_shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) into {new_shape:?}",
                self.shape,
                self.data.len()
            )));
        }
        Ok(Tensor {
            shape: new_shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place `self += other`; shapes must match.
    pub fn accumulate(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Rounds every element through `f32`, the checkpoint storage precision.
    pub fn quantized_f32(&self) -> Self {
        self.map(|x| x as f32 as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_and_constant_fill() {
        let z = Tensor::create(&[2, 2], Init::Zeros).unwrap();
        assert_eq!(z.data(), &[0.0; 4]);
        let c = Tensor::create(&[3], Init::Constant(1.5)).unwrap();
        assert_eq!(c.data(), &[1.5, 1.5, 1.5]);
    }

    #[test]
    fn gaussian_init_is_deterministic() {
        let a = Tensor::create(&[4, 9], Init::FanInGaussian(7)).unwrap();
        let b = Tensor::create(&[4, 9], Init::FanInGaussian(7)).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        let c = Tensor::create(&[4, 9], Init::FanInGaussian(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gaussian_init_has_he_variance() {
        let t = Tensor::create(&[400, 50], Init::FanInGaussian(1)).unwrap();
        let var = t.data().iter().map(|x| x * x).sum::<f64>() / t.len() as f64;
        assert!((var - 2.0 / 50.0).abs() < 0.002, "var {var}");
    }

    #[test]
    fn bad_shapes_are_rejected() {
        assert!(matches!(
            Tensor::create(&[], Init::Zeros),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::create(&[3, 0], Init::Zeros),
            Err(Error::InvalidShape(_))
        ));
        assert!(matches!(
            Tensor::from_vec(&[2], vec![1.0]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn reshape_round_trip() {
        let t = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let back = t.reshaped(&[6]).unwrap().reshaped(&[3, 2]).unwrap();
        assert_eq!(back.data(), t.data());
        assert!(t.reshaped(&[4]).is_err());
    }
}
