//! Small parameterized layers shared by every module.

use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{Init, ParamId, ParamStore};

/// Square-kernel convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        init: Init,
    ) -> Self {
        let weight = ps.init(
            format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            init,
            rng,
        );
        let bias = Some(ps.init(format!("{name}.bias"), &[out_channels], Init::Zeros, rng));
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
        }
    }

    /// Stride-1 convolution that preserves spatial size (odd kernels).
    pub fn same(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
    ) -> Self {
        Self::new(ps, rng, name, in_channels, out_channels, kernel, 1, kernel / 2, init)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn param_count(in_channels: usize, out_channels: usize, kernel: usize) -> usize {
        out_channels * in_channels * kernel * kernel + out_channels
    }

    /// Zeroes weight and bias.
    pub fn zero(&self, ps: &mut ParamStore) {
        ps.get_mut(self.weight).data_mut().fill(0.0);
        if let Some(b) = self.bias {
            ps.get_mut(b).data_mut().fill(0.0);
        }
    }
}

/// Layer normalization across channels at every spatial position.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

pub const NORM_EPS: f64 = 1e-6;

impl ChannelNorm {
    pub fn new(ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, channels: usize) -> Self {
        Self {
            gamma: ps.init(format!("{name}.gamma"), &[channels], Init::Ones, rng),
            beta: ps.init(format!("{name}.beta"), &[channels], Init::Zeros, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm_channels(x, gamma, beta, NORM_EPS)
    }

    pub fn param_count(channels: usize) -> usize {
        2 * channels
    }
}

/// Conv followed by GELU.
pub fn conv_gelu(g: &mut Graph, conv: &Conv, x: Var) -> Var {
    let y = conv.forward(g, x);
    g.gelu(y)
}
