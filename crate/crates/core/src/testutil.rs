//! Direct-loop oracles shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::Conv;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = x.dims3();
    let s = w.shape();
    let (cout, k) = (s[0], s[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    Tensor::from_fn(&[cout, oh, ow], |i| {
        let o = i / (oh * ow);
        let oy = (i / ow) % oh;
        let ox = i % ow;
        let mut acc = b.data()[o];
        for c in 0..cin {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        acc += w.data()[((o * cin + c) * k + ky) * k + kx] * x.at3(c, iy as usize, ix as usize);
                    }
                }
            }
        }
        acc
    })
}

/// Applies a layer's stored weights with [`naive_conv`].
pub fn naive_layer(ps: &ParamStore, conv: &Conv, x: &Tensor) -> Tensor {
    let b = conv
        .bias
        .map(|b| ps.get(b).clone())
        .unwrap_or_else(|| Tensor::zeros(&[conv.out_channels]));
    naive_conv(x, ps.get(conv.weight), &b, conv.stride, conv.pad)
}
