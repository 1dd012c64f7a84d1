//! Minimal 3x3 convolution with symmetric reflect padding, plus the exact
//! adjoint and weight-gradient products needed for backprop and
//! Jacobian-vector checks.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::LatentTensor;

/// Mirror index for one-pixel reflect padding (edge pixel included).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let j = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
    j as usize
}

#[derive(Debug, Clone)]
pub(crate) struct Conv3x3 {
    pub c_in: usize,
    pub c_out: usize,
    /// [c_out][c_in][3][3] row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            c_in,
            c_out,
            weight: vec![0.0; c_out * c_in * 9],
            bias: vec![0.0; c_out],
        }
    }

    pub fn seeded(c_in: usize, c_out: usize, rng: &mut impl Rng, scale: f64) -> Self {
        let weight = (0..c_out * c_in * 9)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            c_in,
            c_out,
            weight,
            bias: vec![0.0; c_out],
        }
    }

    #[inline]
    fn w(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weight[((o * self.c_in + i) * 3 + ky) * 3 + kx]
    }

    fn check_input(&self, x: &LatentTensor) -> Result<()> {
        if x.channels() != self.c_in {
            return Err(Error::shape(
                format!("{} channels", self.c_in),
                format!("{} channels", x.channels()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, x: &LatentTensor) -> Result<LatentTensor> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let mut out = LatentTensor::zeros(self.c_out, h, w);
        for o in 0..self.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = self.bias[o];
                    for i in 0..self.c_in {
                        for ky in 0..3 {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            for kx in 0..3 {
                                let sx = reflect(xx as isize + kx as isize - 1, w);
                                acc += self.w(o, i, ky, kx) * x.at(i, sy, sx);
                            }
                        }
                    }
                    out.set(o, y, xx, acc);
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of forward with respect to the input: scatter-add of the
    /// cotangent back through the padded gather.
    pub fn input_adjoint(&self, d_out: &LatentTensor) -> Result<LatentTensor> {
        if d_out.channels() != self.c_out {
            return Err(Error::shape(
                format!("{} channels", self.c_out),
                format!("{} channels", d_out.channels()),
            ));
        }
        let (h, w) = (d_out.height(), d_out.width());
        let mut d_in = LatentTensor::zeros(self.c_in, h, w);
        for o in 0..self.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let g = d_out.at(o, y, xx);
                    if g == 0.0 {
                        continue;
                    }
                    for i in 0..self.c_in {
                        for ky in 0..3 {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            for kx in 0..3 {
                                let sx = reflect(xx as isize + kx as isize - 1, w);
                                let v = d_in.at(i, sy, sx) + self.w(o, i, ky, kx) * g;
                                d_in.set(i, sy, sx, v);
                            }
                        }
                    }
                }
            }
        }
        Ok(d_in)
    }

    /// Gradient of a scalar loss with respect to (weight, bias), given the
    /// layer input and the output cotangent.
    pub fn weight_grad(&self, x: &LatentTensor, d_out: &LatentTensor) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input(x)?;
        let (h, w) = (x.height(), x.width());
        let mut dw = vec![0.0; self.weight.len()];
        let mut db = vec![0.0; self.bias.len()];
        for o in 0..self.c_out {
            for y in 0..h {
                for xx in 0..w {
                    let g = d_out.at(o, y, xx);
                    if g == 0.0 {
                        continue;
                    }
                    db[o] += g;
                    for i in 0..self.c_in {
                        for ky in 0..3 {
                            let sy = reflect(y as isize + ky as isize - 1, h);
                            for kx in 0..3 {
                                let sx = reflect(xx as isize + kx as isize - 1, w);
                                dw[((o * self.c_in + i) * 3 + ky) * 3 + kx] += g * x.at(i, sy, sx);
                            }
                        }
                    }
                }
            }
        }
        Ok((dw, db))
    }
}
