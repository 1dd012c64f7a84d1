//! Seeded linear stand-in for the multimodal projector: images go through a
//! fixed random linear map, prompts map to stable seeded unit vectors. The
//! composition math only needs a differentiable embedding with a cosine
//! geometry; semantic alignment is simulated.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{Embedder, PromptSpec};
use crate::tensor::{substream_rng, LatentTensor};

#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    seed: u64,
    dim: usize,
    shape: (usize, usize, usize),
    /// dim x (c*h*w) row-major.
    weight: Vec<f64>,
}

impl ToyEmbedder {
    pub fn new(seed: u64, dim: usize, shape: (usize, usize, usize)) -> Self {
        let n = shape.0 * shape.1 * shape.2;
        let mut rng = substream_rng(seed, "embedder");
        let scale = 1.0 / (n as f64).sqrt();
        let weight = (0..dim * n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            seed,
            dim,
            shape,
            weight,
        }
    }

    fn check_shape(&self, x: &LatentTensor) -> Result<()> {
        if x.shape() != self.shape {
            return Err(Error::shape(
                format!("{:?}", self.shape),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(())
    }
}

impl Embedder for ToyEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_image(&self, x: &LatentTensor) -> Result<Vec<f64>> {
        self.check_shape(x)?;
        let n = x.len();
        let data = x.data();
        Ok((0..self.dim)
            .map(|i| {
                let row = &self.weight[i * n..(i + 1) * n];
                row.iter().zip(data).map(|(w, v)| w * v).sum()
            })
            .collect())
    }

    fn embed_text(&self, p: &PromptSpec) -> Vec<f64> {
        let mut rng = substream_rng(self.seed, &format!("text:{}", p.embedding_id));
        let raw: Vec<f64> = (0..self.dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        raw.into_iter().map(|v| v / norm).collect()
    }

    fn image_grad_adjoint(&self, x: &LatentTensor, v: &[f64]) -> Result<LatentTensor> {
        self.check_shape(x)?;
        if v.len() != self.dim {
            return Err(Error::shape(
                format!("{}-vector", self.dim),
                format!("{}-vector", v.len()),
            ));
        }
        let n = x.len();
        let mut out = vec![0.0; n];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            let row = &self.weight[i * n..(i + 1) * n];
            for (o, w) in out.iter_mut().zip(row) {
                *o += vi * w;
            }
        }
        let (c, h, w) = self.shape;
        LatentTensor::from_vec(c, h, w, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gaussian_noise;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn self_cosine_is_one() {
        let emb = ToyEmbedder::new(7, 16, (3, 8, 8));
        let x = gaussian_noise(3, 8, 8, 1).unwrap();
        let e = emb.embed_image(&x).unwrap();
        assert!((cosine(&e, &e) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn image_path_is_linear() {
        let emb = ToyEmbedder::new(7, 16, (3, 8, 8));
        let x = gaussian_noise(3, 8, 8, 2).unwrap();
        let e = emb.embed_image(&x).unwrap();
        let e2 = emb.embed_image(&x.scale(2.5)).unwrap();
        for (a, b) in e.iter().zip(&e2) {
            assert!((2.5 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn text_vectors_stable_and_unit() {
        let emb = ToyEmbedder::new(7, 16, (3, 8, 8));
        let p = PromptSpec::new("a red disc");
        let a = emb.embed_text(&p);
        let b = emb.embed_text(&PromptSpec::new("a red disc"));
        assert_eq!(a, b);
        let norm: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjoint_identity() {
        let emb = ToyEmbedder::new(3, 8, (2, 4, 4));
        let x = gaussian_noise(2, 4, 4, 5).unwrap();
        let v: Vec<f64> = (0..8).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let e = emb.embed_image(&x).unwrap();
        let lhs: f64 = e.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs = x.dot(&emb.image_grad_adjoint(&x, &v).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn wrong_shape_rejected() {
        let emb = ToyEmbedder::new(7, 16, (3, 8, 8));
        assert!(emb.embed_image(&LatentTensor::zeros(3, 4, 4)).is_err());
    }
}
