//! Layer graphs: builders, traced forward pass, loss, and the reverse sweep.

pub mod activity;
pub mod descriptor;
pub mod layer;
pub mod loss;
pub mod model;

pub use activity::{LayerActivity, SpikeTally};
pub use descriptor::{resolve_arch, ArchDescriptor, Family, FeatureToken, ModelOptions};
pub use layer::{BatchNorm, Conv, Layer, Linear, Shortcut};
pub use loss::{cross_entropy, total_loss, LossBreakdown};
pub use model::{
    softmax, ForwardTrace, Gradients, LayerCache, NetworkModel, Param, ParamKind, ParamMut, ParamOwner,
    ShortcutCache,
};

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;

/// Modified VGG for `input` (`[C, H, W]`); see [`ArchDescriptor::vgg_s`].
pub fn build_vgg_s<T: Scalar>(
    input: [usize; 3],
    classes: usize,
    width_multiplier: usize,
    opts: &ModelOptions,
    rng: &mut Rng,
) -> Result<NetworkModel<T>> {
    ArchDescriptor::vgg_s(input, classes, width_multiplier)?.build(opts, rng)
}

/// Pre-activation ResNet with `blocks` residual blocks; see [`ArchDescriptor::resnet_s`].
pub fn build_resnet_s<T: Scalar>(
    input: [usize; 3],
    classes: usize,
    blocks: usize,
    opts: &ModelOptions,
    rng: &mut Rng,
) -> Result<NetworkModel<T>> {
    ArchDescriptor::resnet_s(input, classes, blocks)?.build(opts, rng)
}
