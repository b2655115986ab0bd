//! Parameterized layers shared by the extractor, field and refiner.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` tensor.
pub fn uniform_init<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

pub fn normal_init<T: Real, R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Result<Tensor<T>> {
    let dist = Normal::new(0.0, std).map_err(|e| Error::Config(format!("normal init std {std}: {e}")))?;
    Ok(Tensor::from_fn(shape, |_| T::of(dist.sample(rng))))
}

/// Affine map `y = x W^T + b` over rows of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), uniform_init(&[fan_out, fan_in], fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform_init(&[fan_out], fan_in, rng))?;
        Ok(Linear {
            weight,
            bias,
            fan_in,
            fan_out,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv2d,
    Conv3d,
    Transpose2d,
    Transpose3d,
}

/// Convolution layer; transposed kinds store weights as `[in, out, k...]`.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kind: ConvKind,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        kind: ConvKind,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let spatial = match kind {
            ConvKind::Conv2d | ConvKind::Transpose2d => 2,
            ConvKind::Conv3d | ConvKind::Transpose3d => 3,
        };
        let taps = kernel.pow(spatial as u32);
        let (lead, fan_in) = match kind {
            ConvKind::Conv2d | ConvKind::Conv3d => ([out_c, in_c], in_c * taps),
            // each output receives in_c * taps / stride^spatial inputs on average
            ConvKind::Transpose2d | ConvKind::Transpose3d => {
                ([in_c, out_c], (in_c * taps / stride.pow(spatial as u32)).max(in_c))
            }
        };
        let mut shape = lead.to_vec();
        shape.extend(std::iter::repeat_n(kernel, spatial));
        let weight = store.add(format!("{name}.weight"), uniform_init(&shape, fan_in, rng))?;
        let bias = store.add(format!("{name}.bias"), uniform_init(&[out_c], fan_in, rng))?;
        Ok(Conv {
            weight,
            bias,
            kind,
            stride,
            pad,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = Some(g.param(self.bias));
        match self.kind {
            ConvKind::Conv2d => g.conv2d(x, w, b, self.stride, self.pad),
            ConvKind::Conv3d => g.conv3d(x, w, b, self.stride, self.pad),
            ConvKind::Transpose2d => g.conv_transpose2d(x, w, b, self.stride, self.pad),
            ConvKind::Transpose3d => g.conv_transpose3d(x, w, b, self.stride, self.pad),
        }
    }
}

/// Layer normalization over the last axis with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], T::one()))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}
