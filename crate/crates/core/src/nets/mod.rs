//! Network architectures: layer primitives, the segmentation U-Net and its
//! discriminator, the geometric matcher, the alignment-aware generator, and
//! the frozen feature pyramid used by the perceptual loss.

pub mod alias;
pub mod features;
pub mod gmm;
pub mod layers;
pub mod patchgan;
pub mod unet;
