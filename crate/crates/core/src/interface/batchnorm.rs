//! Inference-time BatchNorm and its folding into the preceding linear stage.

use ndarray::{Array1, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::network::{Affine, Conv, Stage};

/// Per-channel `gamma * (x - mean) / sqrt(var + eps) + beta`.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub eps: f64,
}

impl BatchNorm {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, channels: usize) -> Result<()> {
        for (name, len) in [
            ("gamma", self.gamma.len()),
            ("beta", self.beta.len()),
            ("mean", self.mean.len()),
            ("var", self.var.len()),
        ] {
            if len != channels {
                return Err(Error::Shape {
                    what: format!("batchnorm {name}"),
                    expected: channels,
                    found: len,
                });
            }
        }
        Ok(())
    }

    /// `gamma / sqrt(var + eps)` per channel.
    pub fn scale(&self) -> Result<Array1<f64>> {
        let mut s = Array1::zeros(self.channels());
        for c in 0..self.channels() {
            let d = self.var[c] + self.eps;
            if !(d > 0.0) {
                return Err(Error::InvalidStatistics {
                    channel: c,
                    value: d,
                });
            }
            s[c] = self.gamma[c] / d.sqrt();
        }
        Ok(s)
    }

    /// Applies the normalization to a channel-major vector with `plane`
    /// elements per channel.
    pub fn apply(&self, x: ArrayView1<f64>, plane: usize) -> Result<Array1<f64>> {
        let scale = self.scale()?;
        Ok(Array1::from_shape_fn(x.len(), |i| {
            let c = i / plane;
            scale[c] * (x[i] - self.mean[c]) + self.beta[c]
        }))
    }
}

pub fn fold_into_affine(a: &Affine, bn: &BatchNorm) -> Result<Affine> {
    bn.check(a.out_dim())?;
    let s = bn.scale()?;
    let weight = &a.weight * &s.view().insert_axis(Axis(1));
    let bias = &s * &(&a.bias - &bn.mean) + &bn.beta;
    Ok(Affine {
        weight,
        bias,
        linear_output: a.linear_output,
        output_shape: a.output_shape,
    })
}

pub fn fold_into_conv(c: &Conv, bn: &BatchNorm) -> Result<Conv> {
    bn.check(c.out_channels())?;
    let s = bn.scale()?;
    let mut kernel = c.kernel.clone();
    for (o, mut k) in kernel.outer_iter_mut().enumerate() {
        k *= s[o];
    }
    let bias = &s * &(&c.bias - &bn.mean) + &bn.beta;
    Ok(Conv {
        kernel,
        bias,
        stride: c.stride,
        padding: c.padding,
        linear_output: c.linear_output,
    })
}

/// Folds `bn` into the affine or conv stage it follows.
pub fn fold_batchnorm(stage: &Stage, bn: &BatchNorm) -> Result<Stage> {
    match stage {
        Stage::Affine(a) => fold_into_affine(a, bn).map(Stage::Affine),
        Stage::Conv(c) => fold_into_conv(c, bn).map(Stage::Conv),
        other => Err(Error::Config(format!(
            "batchnorm must follow an affine or conv stage, not {}",
            other.kind()
        ))),
    }
}
