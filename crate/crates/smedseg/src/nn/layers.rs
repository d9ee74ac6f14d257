//! Parameterized layers built on the op set.
//!
//! Every layer exposes `visit` so the model can enumerate parameters and
//! batch-norm buffers under hierarchical names (`backbone.stem.conv.weight`
//! style) for the optimizer and checkpoints.

use std::cell::RefCell;
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::init;
use super::ops::{self, ConvSpec};
use super::tensor::Tensor;
use super::var::Var;

/// What a visitor sees while walking a module tree.
pub enum NamedTensor<'a> {
    /// Trainable parameter.
    Param(&'a Var),
    /// Non-trainable state (batch-norm running statistics).
    Buffer(&'a Rc<RefCell<Tensor>>),
}

pub type Visitor<'a, 'b> = &'a mut dyn FnMut(String, NamedTensor<'b>);

/// Training / inference switch, threaded through forward passes that touch
/// batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: ConvSpec,
    pub kernel: usize,
}

impl Conv2d {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Self {
        let fan_in = (in_ch / spec.groups) * kernel * kernel;
        let weight = Var::parameter(init::kaiming_normal(
            rng,
            &[out_ch, in_ch / spec.groups, kernel, kernel],
            fan_in,
        ));
        let bias = bias.then(|| Var::parameter(Tensor::zeros(&[out_ch])));
        Conv2d { weight, bias, spec, kernel }
    }

    pub fn forward(&self, x: &Var) -> Var {
        ops::conv2d(x, &self.weight, self.bias.as_ref(), self.spec)
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.weight"), NamedTensor::Param(&self.weight));
        if let Some(b) = &self.bias {
            v(format!("{prefix}.bias"), NamedTensor::Param(b));
        }
    }
}

pub struct ConvTranspose2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
}

impl ConvTranspose2d {
    pub fn new(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = in_ch * kernel * kernel;
        ConvTranspose2d {
            weight: Var::parameter(init::kaiming_normal(
                rng,
                &[in_ch, out_ch, kernel, kernel],
                fan_in,
            )),
            bias: Var::parameter(Tensor::zeros(&[out_ch])),
            stride,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        ops::conv_transpose2d(x, &self.weight, Some(&self.bias), self.stride)
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.weight"), NamedTensor::Param(&self.weight));
        v(format!("{prefix}.bias"), NamedTensor::Param(&self.bias));
    }
}

pub struct BatchNorm2d {
    pub gamma: Var,
    pub beta: Var,
    pub running_mean: Rc<RefCell<Tensor>>,
    pub running_var: Rc<RefCell<Tensor>>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Var::parameter(Tensor::full(&[channels], 1.0)),
            beta: Var::parameter(Tensor::zeros(&[channels])),
            running_mean: Rc::new(RefCell::new(Tensor::zeros(&[channels]))),
            running_var: Rc::new(RefCell::new(Tensor::full(&[channels], 1.0))),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Var, mode: Mode) -> Var {
        match mode {
            Mode::Train => {
                let (out, stats) = ops::batch_norm_train(x, &self.gamma, &self.beta, self.eps);
                // Running estimates use the unbiased variance, matching the
                // usual convention; fall back to biased when m == 1.
                let shape = x.shape();
                let m = (shape[0] * shape[2] * shape[3]) as f64;
                let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                {
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for c in 0..stats.mean.len() {
                        rm.data_mut()[c] =
                            (1.0 - self.momentum) * rm.data()[c] + self.momentum * stats.mean[c];
                        rv.data_mut()[c] = (1.0 - self.momentum) * rv.data()[c]
                            + self.momentum * stats.var[c] * unbias;
                    }
                }
                out
            }
            Mode::Eval => {
                let rm = self.running_mean.borrow();
                let rv = self.running_var.borrow();
                ops::batch_norm_eval(x, &self.gamma, &self.beta, rm.data(), rv.data(), self.eps)
            }
        }
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.gamma"), NamedTensor::Param(&self.gamma));
        v(format!("{prefix}.beta"), NamedTensor::Param(&self.beta));
        v(format!("{prefix}.running_mean"), NamedTensor::Buffer(&self.running_mean));
        v(format!("{prefix}.running_var"), NamedTensor::Buffer(&self.running_var));
    }
}

pub struct LayerNormChannels {
    pub gamma: Var,
    pub beta: Var,
    pub eps: f64,
}

impl LayerNormChannels {
    pub fn new(channels: usize) -> Self {
        LayerNormChannels {
            gamma: Var::parameter(Tensor::full(&[channels], 1.0)),
            beta: Var::parameter(Tensor::zeros(&[channels])),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        ops::layer_norm_channels(x, &self.gamma, &self.beta, self.eps)
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.gamma"), NamedTensor::Param(&self.gamma));
        v(format!("{prefix}.beta"), NamedTensor::Param(&self.beta));
    }
}

pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, in_features: usize, out_features: usize) -> Self {
        Linear {
            weight: Var::parameter(init::kaiming_normal(
                rng,
                &[out_features, in_features],
                in_features,
            )),
            bias: Var::parameter(Tensor::zeros(&[out_features])),
        }
    }

    pub fn forward(&self, x: &Var) -> Var {
        ops::linear(x, &self.weight, &self.bias)
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        v(format!("{prefix}.weight"), NamedTensor::Param(&self.weight));
        v(format!("{prefix}.bias"), NamedTensor::Param(&self.bias));
    }
}

/// Depthwise separable convolution: per-channel spatial convolution followed
/// by a 1x1 pointwise mixer. The spatial part carries the stride/dilation.
pub struct DwSepConv {
    pub depthwise: Conv2d,
    pub pointwise: Conv2d,
}

impl DwSepConv {
    pub fn new(
        rng: &mut ChaCha8Rng,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
    ) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        let depthwise = Conv2d::new(
            rng,
            in_ch,
            in_ch,
            kernel,
            ConvSpec { stride, padding, dilation, groups: in_ch },
            false,
        );
        let pointwise = Conv2d::new(rng, in_ch, out_ch, 1, ConvSpec::default(), true);
        DwSepConv { depthwise, pointwise }
    }

    pub fn forward(&self, x: &Var) -> Var {
        self.pointwise.forward(&self.depthwise.forward(x))
    }

    /// Spatial stride of the depthwise stage.
    pub fn stride(&self) -> usize {
        self.depthwise.spec.stride
    }

    pub fn visit<'b>(&'b self, prefix: &str, v: Visitor<'_, 'b>) {
        self.depthwise.visit(&format!("{prefix}.depthwise"), v);
        self.pointwise.visit(&format!("{prefix}.pointwise"), v);
    }
}
