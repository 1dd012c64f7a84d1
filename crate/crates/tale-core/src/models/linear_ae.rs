//! Exactly linear toy autoencoder: f x f average pooling down, nearest
//! neighbor up. Stands in for the learned codec so all latent-space algebra
//! stays checkable.

use crate::error::{Error, Result};
use crate::models::Autoencoder;
use crate::tensor::LatentTensor;

#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    f: usize,
}

impl LinearAutoencoder {
    pub fn new(f: usize) -> Result<Self> {
        if f == 0 {
            return Err(Error::InvalidConfig("downscale factor must be >= 1".into()));
        }
        Ok(Self { f })
    }
}

impl Default for LinearAutoencoder {
    fn default() -> Self {
        Self { f: 2 }
    }
}

impl Autoencoder for LinearAutoencoder {
    fn downscale(&self) -> usize {
        self.f
    }

    fn encode(&self, x: &LatentTensor) -> Result<LatentTensor> {
        let f = self.f;
        if x.height() % f != 0 || x.width() % f != 0 {
            return Err(Error::shape(
                format!("dims divisible by {f}"),
                format!("{}x{}", x.height(), x.width()),
            ));
        }
        let (h, w) = (x.height() / f, x.width() / f);
        let norm = (f * f) as f64;
        Ok(LatentTensor::from_fn(x.channels(), h, w, |c, y, xx| {
            // Row-wise partial sums keep the block-constant case exact.
            let mut total = 0.0;
            for dy in 0..f {
                let mut row = 0.0;
                for dx in 0..f {
                    row += x.at(c, y * f + dy, xx * f + dx);
                }
                total += row;
            }
            total / norm
        }))
    }

    fn decode(&self, z: &LatentTensor) -> Result<LatentTensor> {
        let f = self.f;
        Ok(LatentTensor::from_fn(
            z.channels(),
            z.height() * f,
            z.width() * f,
            |c, y, x| z.at(c, y / f, x / f),
        ))
    }

    fn decode_adjoint_vec(&self, v: &LatentTensor) -> Result<LatentTensor> {
        let f = self.f;
        if v.height() % f != 0 || v.width() % f != 0 {
            return Err(Error::shape(
                format!("dims divisible by {f}"),
                format!("{}x{}", v.height(), v.width()),
            ));
        }
        let (h, w) = (v.height() / f, v.width() / f);
        Ok(LatentTensor::from_fn(v.channels(), h, w, |c, y, x| {
            let mut total = 0.0;
            for dy in 0..f {
                for dx in 0..f {
                    total += v.at(c, y * f + dy, x * f + dx);
                }
            }
            total
        }))
    }
}
