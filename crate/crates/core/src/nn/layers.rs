//! Parameterized building blocks.

use super::conv::ConvParams;
use super::norm::NORM_EPS;
use super::params::{Ctx, Init, ParamBuilder, ParamId};
use crate::autograd::Var;
use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'g, T: Scalar>(self, x: Var<'g, T>) -> Var<'g, T> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => x.gelu(),
        }
    }
}

/// Fully connected layer, weight stored `[in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_dim: usize, out_dim: usize, init: Init) -> Self {
        let mut pb = pb.sub(name);
        let weight = pb.weight("weight", &[in_dim, out_dim], init);
        let bias = Some(pb.no_decay("bias", &[out_dim], Init::Zeros));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn num_params(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.linear(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
}

impl Conv2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, params: ConvParams) -> Result<Self> {
        params.validate()?;
        let mut pb = pb.sub(name);
        let fan_in = params.in_ch / params.groups * params.kernel * params.kernel;
        let weight = pb.weight("weight", &params.weight_shape(), Init::He(fan_in));
        let bias = params.has_bias.then(|| pb.no_decay("bias", &[params.out_ch], Init::Zeros));
        Ok(Self { weight, bias, params })
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.params)
    }
}

/// Stride-2 transposed convolution doubling spatial size.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub params: ConvParams,
}

impl ConvTranspose2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, in_ch: usize, out_ch: usize) -> Self {
        let params = ConvParams { in_ch, out_ch, kernel: 2, stride: 2, padding: 0, groups: 1, has_bias: true };
        let mut pb = pb.sub(name);
        let weight = pb.weight("weight", &[in_ch, out_ch, 2, 2], Init::He(in_ch));
        let bias = Some(pb.no_decay("bias", &[out_ch], Init::Zeros));
        Self { weight, bias, params }
    }

    pub fn num_params(in_ch: usize, out_ch: usize) -> usize {
        in_ch * out_ch * 4 + out_ch
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.conv_transpose2d(ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.params)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, dim: usize) -> Self {
        let mut pb = pb.sub(name);
        let gamma = pb.no_decay("weight", &[dim], Init::Ones);
        let beta = pb.no_decay("bias", &[dim], Init::Zeros);
        Self { gamma, beta, dim }
    }

    pub fn num_params(dim: usize) -> usize {
        2 * dim
    }

    /// Normalizes the last axis.
    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm(ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }

    /// Normalizes the channel axis of `[B, C, H, W]`.
    pub fn forward_channels<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.layer_norm_channels(ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, name: &str, channels: usize) -> Self {
        let mut pb = pb.sub(name);
        let gamma = pb.no_decay("weight", &[channels], Init::Ones);
        let beta = pb.no_decay("bias", &[channels], Init::Zeros);
        let running_mean = pb.buffer("running_mean", Tensor::zeros([channels]));
        let running_var = pb.buffer("running_var", Tensor::ones([channels]));
        Self { gamma, beta, running_mean, running_var, momentum: 0.1 }
    }

    pub fn num_params(channels: usize) -> usize {
        2 * channels
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (gamma, beta) = (ctx.p(self.gamma), ctx.p(self.beta));
        if !ctx.training() {
            return x.batch_norm_eval(gamma, beta, ctx.value(self.running_mean), ctx.value(self.running_var), NORM_EPS);
        }
        let (y, stats) = x.batch_norm_train(gamma, beta, NORM_EPS)?;
        let m = T::c(self.momentum);
        let keep = T::one() - m;
        let n = stats.count.max(2);
        let unbiased = T::of_usize(n) / T::of_usize(n - 1);
        let rm = ctx.value(self.running_mean).zip_map(&stats.mean, |r, b| keep * r + m * b)?;
        let rv = ctx.value(self.running_var).zip_map(&stats.var, |r, b| keep * r + m * b * unbiased)?;
        ctx.queue_buffer_update(self.running_mean, rm);
        ctx.queue_buffer_update(self.running_var, rv);
        Ok(y)
    }
}

/// Two-layer perceptron `Linear -> act -> Linear`.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub act: Activation,
}

impl Mlp {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        name: &str,
        dim: usize,
        hidden: usize,
        act: Activation,
        init: impl Fn(usize, usize) -> Init,
    ) -> Self {
        let mut pb = pb.sub(name);
        Self {
            fc1: Linear::new(&mut pb, "fc1", dim, hidden, init(dim, hidden)),
            fc2: Linear::new(&mut pb, "fc2", hidden, dim, init(hidden, dim)),
            act,
        }
    }

    pub fn num_params(dim: usize, hidden: usize) -> usize {
        Linear::num_params(dim, hidden) + Linear::num_params(hidden, dim)
    }

    pub fn forward<'g, T: Scalar>(&self, ctx: &Ctx<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.act.apply(self.fc1.forward(ctx, x)?);
        self.fc2.forward(ctx, h)
    }
}
