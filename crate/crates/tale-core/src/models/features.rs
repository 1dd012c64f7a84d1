//! Fixed seeded convolutional feature bank; its Gram matrix carries the
//! second-order statistics used by the style energy.

use crate::error::{Error, Result};
use crate::models::convnet::Conv3x3;
use crate::models::FeatureBank;
use crate::tensor::{substream_rng, LatentTensor};

#[derive(Debug, Clone)]
pub struct ConvFeatureBank {
    conv: Conv3x3,
}

impl ConvFeatureBank {
    pub fn new(seed: u64, channels: usize, num_features: usize) -> Self {
        let mut rng = substream_rng(seed, "feature-bank");
        let scale = 1.0 / ((9 * channels) as f64).sqrt();
        Self {
            conv: Conv3x3::seeded(channels, num_features, &mut rng, scale),
        }
    }
}

impl FeatureBank for ConvFeatureBank {
    fn num_features(&self) -> usize {
        self.conv.c_out
    }

    fn features(&self, x: &LatentTensor) -> Result<LatentTensor> {
        self.conv.forward(x)
    }

    fn gram(&self, x: &LatentTensor) -> Result<Vec<f64>> {
        let f = self.features(x)?;
        let k = f.channels();
        let hw = (f.height() * f.width()) as f64;
        let plane = f.height() * f.width();
        let data = f.data();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let a = &data[i * plane..(i + 1) * plane];
                let b = &data[j * plane..(j + 1) * plane];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                g[i * k + j] = dot / hw;
                g[j * k + i] = dot / hw;
            }
        }
        Ok(g)
    }

    fn gram_grad_adjoint(&self, x: &LatentTensor, d_gram: &[f64]) -> Result<LatentTensor> {
        let k = self.conv.c_out;
        if d_gram.len() != k * k {
            return Err(Error::shape(
                format!("{k}x{k} matrix"),
                format!("{} values", d_gram.len()),
            ));
        }
        let f = self.features(x)?;
        let hw = (f.height() * f.width()) as f64;
        // dL/dF_i(p) = sum_j (dG_ij + dG_ji) F_j(p) / (H W)
        let mut d_f = LatentTensor::zeros(k, f.height(), f.width());
        for i in 0..k {
            for j in 0..k {
                let coeff = (d_gram[i * k + j] + d_gram[j * k + i]) / hw;
                if coeff == 0.0 {
                    continue;
                }
                for y in 0..f.height() {
                    for xx in 0..f.width() {
                        let v = d_f.at(i, y, xx) + coeff * f.at(j, y, xx);
                        d_f.set(i, y, xx, v);
                    }
                }
            }
        }
        self.conv.input_adjoint(&d_f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_noise;

    #[test]
    fn zero_image_zero_gram() {
        let fb = ConvFeatureBank::new(1, 3, 6);
        let g = fb.gram(&LatentTensor::zeros(3, 8, 8)).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gram_symmetric_psd() {
        let fb = ConvFeatureBank::new(2, 3, 5);
        let x = gaussian_noise(3, 8, 8, 4).unwrap();
        let g = fb.gram(&x).unwrap();
        let k = 5;
        for i in 0..k {
            for j in 0..k {
                assert_eq!(g[i * k + j], g[j * k + i]);
            }
        }
        // PSD: v^T G v >= 0 for random v (G = A A^T / HW by construction).
        for seed in 0..8u64 {
            let v = gaussian_noise(1, 1, k, seed).unwrap();
            let v = v.data();
            let mut q = 0.0;
            for i in 0..k {
                for j in 0..k {
                    q += v[i] * g[i * k + j] * v[j];
                }
            }
            assert!(q >= -1e-12, "quadratic form {q}");
        }
    }

    #[test]
    fn gram_matches_brute_force() {
        let fb = ConvFeatureBank::new(3, 3, 4);
        let x = gaussian_noise(3, 4, 4, 11).unwrap();
        let g = fb.gram(&x).unwrap();
        let f = fb.features(&x).unwrap();
        let hw = 16.0;
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for y in 0..4 {
                    for xx in 0..4 {
                        acc += f.at(i, y, xx) * f.at(j, y, xx);
                    }
                }
                assert!((g[i * 4 + j] - acc / hw).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gram_adjoint_matches_fd() {
        let fb = ConvFeatureBank::new(5, 2, 3);
        let x = gaussian_noise(2, 4, 4, 7).unwrap();
        let d_gram: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64) - 0.35).collect();
        let grad = fb.gram_grad_adjoint(&x, &d_gram).unwrap();
        // scalar L = <dG, gram(x)>
        let scalar = |x: &LatentTensor| -> f64 {
            let g = fb.gram(x).unwrap();
            g.iter().zip(&d_gram).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for idx in [0usize, 7, 13, 28] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (scalar(&xp) - scalar(&xm)) / (2.0 * h);
            assert!(
                (grad.data()[idx] - fd).abs() < 1e-7,
                "idx {idx}: {} vs {fd}",
                grad.data()[idx]
            );
        }
    }
}
