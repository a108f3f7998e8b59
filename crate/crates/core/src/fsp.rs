//! Fine-grained spatial perception: grouped channel mixing of fused
//! motion and appearance features.
//!
//! The fused input `zeta = motion + encoder` is expanded to `3C` channels
//! and cut into `G` contiguous groups of three `C/G`-channel sets. A carry
//! chain walks the groups in order; each step convolves the previous carry
//! with the group's three sets and re-splits the result into the next carry
//! and two output sets. The output sets from all groups, plus the final
//! carry, are integrated back to `C` channels and added to `zeta`.

use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::Conv;
use crate::params::{Init, ParamStore};
use crate::tensor::Tensor;

/// Expanded features split into `G` groups of three equal sets.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupedFeatures {
    /// `groups[j][s]` is set `s` (0, 1, 2) of group `j`, each `[C/G, H, W]`.
    pub groups: Vec<[Tensor; 3]>,
}

impl GroupedFeatures {
    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    pub fn set_channels(&self) -> usize {
        self.groups.first().map_or(0, |g| g[0].dims3().0)
    }

    /// Concatenation of every set in (group, set) order; reproduces the
    /// expanded tensor.
    pub fn reassemble(&self) -> Tensor {
        let parts: Vec<&Tensor> = self.groups.iter().flat_map(|g| g.iter()).collect();
        Tensor::concat_channels(&parts)
    }
}

/// Contiguous partition of a `[3C, H, W]` tensor into `groups` groups.
pub fn partition(expanded: &Tensor, groups: usize) -> Result<GroupedFeatures> {
    let (c3, _, _) = expanded.dims3();
    if groups == 0 || c3 % (3 * groups) != 0 {
        return Err(shape_err!(
            "{c3} expanded channels cannot form {groups} groups of 3 sets"
        ));
    }
    let cp = c3 / (3 * groups);
    let groups = (0..groups)
        .map(|j| {
            let base = 3 * cp * j;
            [
                expanded.narrow_channels(base, cp),
                expanded.narrow_channels(base + cp, cp),
                expanded.narrow_channels(base + 2 * cp, cp),
            ]
        })
        .collect();
    Ok(GroupedFeatures { groups })
}

#[derive(Clone, Debug)]
pub struct Fsp {
    channels: usize,
    groups: usize,
    pub expand: Conv,
    /// One 3x3 conv per group: `[carry, set1, set2, set3]` (4c') -> 3c'.
    pub mix: Vec<Conv>,
    /// Integration block over `[rho2, rho3, carry_G]` (2C + c') -> C.
    pub integrate1: Conv,
    pub integrate2: Conv,
}

/// Outputs of the carry chain.
#[derive(Clone, Copy, Debug)]
pub struct MixOutput {
    pub rho2: Var,
    pub rho3: Var,
    pub carry: Var,
}

impl Fsp {
    pub fn new(
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        channels: usize,
        groups: usize,
    ) -> Result<Self> {
        if groups == 0 || !channels.is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "fsp group count {groups} must divide channel count {channels}"
            )));
        }
        let c = channels;
        let cp = c / groups;
        let mix = (0..groups)
            .map(|j| Conv::same(ps, rng, &format!("{prefix}.mix{j}"), 4 * cp, 3 * cp, 3, Init::He))
            .collect();
        Ok(Self {
            channels,
            groups,
            expand: Conv::same(ps, rng, &format!("{prefix}.expand"), c, 3 * c, 1, Init::He),
            mix,
            integrate1: Conv::same(ps, rng, &format!("{prefix}.integrate1"), 2 * c + cp, c, 3, Init::He),
            integrate2: Conv::same(
                ps,
                rng,
                &format!("{prefix}.integrate2"),
                c,
                c,
                1,
                Init::TruncNormal(0.02),
            ),
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn param_count(channels: usize, groups: usize) -> usize {
        let c = channels;
        let cp = c / groups;
        Conv::param_count(c, 3 * c, 1)
            + groups * Conv::param_count(4 * cp, 3 * cp, 3)
            + Conv::param_count(2 * c + cp, c, 3)
            + Conv::param_count(c, c, 1)
    }

    /// Zeroes the mixing convs and the integration block.
    pub fn zero_mixing_and_integration(&self, ps: &mut ParamStore) {
        for m in &self.mix {
            m.zero(ps);
        }
        self.integrate1.zero(ps);
        self.integrate2.zero(ps);
    }

    /// `zeta = motion + encoder_feat`.
    pub fn fuse_inputs(g: &mut Graph, motion: Var, encoder_feat: Var) -> Result<Var> {
        if g.shape(motion) != g.shape(encoder_feat) {
            return Err(shape_err!(
                "motion {:?} and encoder {:?} features differ",
                g.shape(motion),
                g.shape(encoder_feat)
            ));
        }
        Ok(g.add(motion, encoder_feat))
    }

    /// 1x1 expansion to 3C channels, split into `G` groups of three sets.
    pub fn expand_and_group(&self, g: &mut Graph, zeta: Var) -> Result<Vec<[Var; 3]>> {
        let (c, _, _) = g.value(zeta).dims3();
        if c != self.channels {
            return Err(shape_err!("fsp expects {} channels, got {c}", self.channels));
        }
        let e = self.expand.forward(g, zeta);
        let cp = c / self.groups;
        Ok((0..self.groups)
            .map(|j| {
                let base = 3 * cp * j;
                [
                    g.narrow(e, base, cp),
                    g.narrow(e, base + cp, cp),
                    g.narrow(e, base + 2 * cp, cp),
                ]
            })
            .collect())
    }

    /// The sequential carry chain over the groups.
    pub fn group_mix(&self, g: &mut Graph, grouped: &[[Var; 3]]) -> Result<MixOutput> {
        if grouped.len() != self.groups {
            return Err(shape_err!("expected {} groups, got {}", self.groups, grouped.len()));
        }
        let cp = self.channels / self.groups;
        let (_, h, w) = g.value(grouped[0][0]).dims3();
        let mut carry = g.constant(Tensor::zeros(&[cp, h, w]));
        let mut outs2 = Vec::with_capacity(self.groups);
        let mut outs3 = Vec::with_capacity(self.groups);
        for (sets, conv) in grouped.iter().zip(&self.mix) {
            let cat = g.concat(&[carry, sets[0], sets[1], sets[2]]);
            let m = conv.forward(g, cat);
            let m = g.gelu(m);
            carry = g.narrow(m, 0, cp);
            outs2.push(g.narrow(m, cp, cp));
            outs3.push(g.narrow(m, 2 * cp, cp));
        }
        let rho2 = g.concat(&outs2);
        let rho3 = g.concat(&outs3);
        Ok(MixOutput { rho2, rho3, carry })
    }

    /// `r_t = Integrate([rho2, rho3, carry_G]) + zeta`.
    pub fn forward(&self, g: &mut Graph, motion: Var, encoder_feat: Var) -> Result<Var> {
        let zeta = Self::fuse_inputs(g, motion, encoder_feat)?;
        let grouped = self.expand_and_group(g, zeta)?;
        let mix = self.group_mix(g, &grouped)?;
        let cat = g.concat(&[mix.rho2, mix.rho3, mix.carry]);
        let h = self.integrate1.forward(g, cat);
        let h = g.gelu(h);
        let h = self.integrate2.forward(g, h);
        Ok(g.add(h, zeta))
    }
}

/// Inference wrapper for [`Fsp::expand_and_group`].
pub fn expand_and_group(fsp: &Fsp, ps: &ParamStore, zeta: &Tensor) -> Result<GroupedFeatures> {
    let mut g = Graph::inference(ps);
    let z = g.constant(zeta.clone());
    let sets = fsp.expand_and_group(&mut g, z)?;
    Ok(GroupedFeatures {
        groups: sets.iter().map(|s| s.map(|v| g.value(v).clone())).collect(),
    })
}

/// Inference wrapper for [`Fsp::group_mix`]; returns `(rho2, rho3, carry_G)`.
pub fn group_mix(fsp: &Fsp, ps: &ParamStore, grouped: &GroupedFeatures) -> Result<(Tensor, Tensor, Tensor)> {
    let mut g = Graph::inference(ps);
    let sets: Vec<[Var; 3]> = grouped
        .groups
        .iter()
        .map(|s| [0, 1, 2].map(|i| g.constant(s[i].clone())))
        .collect();
    let out = fsp.group_mix(&mut g, &sets)?;
    Ok((
        g.value(out.rho2).clone(),
        g.value(out.rho3).clone(),
        g.value(out.carry).clone(),
    ))
}

/// Inference wrapper for [`Fsp::forward`].
pub fn fsp_forward(fsp: &Fsp, ps: &ParamStore, motion: &Tensor, encoder_feat: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(ps);
    let m = g.constant(motion.clone());
    let e = g.constant(encoder_feat.clone());
    let out = fsp.forward(&mut g, m, e)?;
    Ok(g.value(out).clone())
}
