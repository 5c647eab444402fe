//! U-Net segmentation generator: a ladder of double-conv blocks with 2x2
//! average-pool descents, nearest-neighbor ascents and skip concatenations,
//! closed by a zero-initialized 1x1 head so the untrained network emits
//! uniform logits.

use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::{LabelMap, PARSE_CLASSES};
use crate::nets::layers::{Conv2d, ConvStack, Init, InstanceNorm2d, StackLayer};
use crate::ops::resize::{
    downsample_area_2x, downsample_area_2x_backward, upsample_nearest_2x,
    upsample_nearest_2x_backward,
};
use crate::ops::softmax::softmax_cross_entropy;
use crate::param::{Net, Param};
use crate::tensor::Tensor;

fn conv_blk<E: Element>(rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> ConvStack<E> {
    let g = 0.02;
    ConvStack::new(vec![
        StackLayer::Conv(Conv2d::new(rng, &format!("{name}.c0"), c_in, c_out, 3, 1, 1, Init::Normal(g))),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.n0"), c_out)),
        StackLayer::Relu,
        StackLayer::Conv(Conv2d::new(rng, &format!("{name}.c1"), c_out, c_out, 3, 1, 1, Init::Normal(g))),
        StackLayer::Norm(InstanceNorm2d::new(&format!("{name}.n1"), c_out)),
        StackLayer::Relu,
    ])
}

/// Four-level U-Net; `widths[i]` is the channel count at level `i` (level 0
/// at full input resolution, level 3 at the bottleneck).
pub struct UNet<E: Element> {
    enc: Vec<ConvStack<E>>,
    dec: Vec<ConvStack<E>>,
    head: Conv2d<E>,
    widths: [usize; 4],
}

impl<E: Element> UNet<E> {
    pub fn new(rng: &mut ChaCha8Rng, name: &str, in_ch: usize, base: usize, out_ch: usize) -> Self {
        let widths = [base, base * 2, base * 4, base * 8];
        let enc = vec![
            conv_blk(rng, &format!("{name}.e0"), in_ch, widths[0]),
            conv_blk(rng, &format!("{name}.e1"), widths[0], widths[1]),
            conv_blk(rng, &format!("{name}.e2"), widths[1], widths[2]),
            conv_blk(rng, &format!("{name}.e3"), widths[2], widths[3]),
        ];
        // decoder blocks run bottom-up; each consumes [upsampled | skip]
        let dec = vec![
            conv_blk(rng, &format!("{name}.d0"), widths[3] + widths[2], widths[2]),
            conv_blk(rng, &format!("{name}.d1"), widths[2] + widths[1], widths[1]),
            conv_blk(rng, &format!("{name}.d2"), widths[1] + widths[0], widths[0]),
        ];
        let head = Conv2d::new(rng, &format!("{name}.head"), widths[0], out_ch, 1, 1, 0, Init::Zero);
        UNet { enc, dec, head, widths }
    }

    /// Input height/width must be divisible by 8 (three pooling descents).
    pub fn forward(&mut self, x: &Tensor<E>) -> Tensor<E> {
        assert!(x.dim(2) % 8 == 0 && x.dim(3) % 8 == 0, "U-Net input must halve three times");
        let mut skips = Vec::with_capacity(3);
        let mut h = x.clone();
        for lv in 0..3 {
            h = self.enc[lv].forward(&h);
            skips.push(h.clone());
            h = downsample_area_2x(&h);
        }
        h = self.enc[3].forward(&h);
        for (i, dec) in self.dec.iter_mut().enumerate() {
            let up = upsample_nearest_2x(&h);
            let cat = Tensor::concat_channels(&[&up, &skips[2 - i]]).expect("ladder sizes line up");
            h = dec.forward(&cat);
        }
        self.head.forward(&h)
    }

    /// Backward from the logits gradient; accumulates every parameter
    /// gradient and returns the input gradient.
    pub fn backward(&mut self, g_logits: &Tensor<E>) -> Tensor<E> {
        let mut g = self.head.backward(g_logits);
        let mut skip_grads: Vec<Option<Tensor<E>>> = vec![None, None, None];
        for i in (0..3).rev() {
            // decoder i consumed concat(up(h), skip[2 - i])
            let g_cat = self.dec[i].backward(&g);
            let up_ch = self.widths[3 - i];
            let g_up = g_cat.slice_channels(0, up_ch).expect("ladder sizes line up");
            let g_skip = g_cat.slice_channels(up_ch, g_cat.dim(1) - up_ch).expect("ladder sizes line up");
            skip_grads[2 - i] = Some(g_skip);
            g = upsample_nearest_2x_backward(&g_up);
        }
        g = self.enc[3].backward(&g);
        for lv in (0..3).rev() {
            g = downsample_area_2x_backward(&g);
            g.add_scaled_assign(skip_grads[lv].as_ref().unwrap(), E::ONE);
            g = self.enc[lv].backward(&g);
        }
        g
    }
}

impl<E: Element> Net<E> for UNet<E> {
    fn params(&mut self) -> Vec<&mut Param<E>> {
        let mut p = Vec::new();
        for s in &mut self.enc {
            p.extend(s.params());
        }
        for s in &mut self.dec {
            p.extend(s.params());
        }
        p.extend(self.head.params());
        p
    }
}

/// Pixel-wise cross entropy between parse logits and a target label map:
/// mean over pixels of −log softmax(target class). Returns the loss and the
/// logits gradient.
pub fn ce_loss<E: Element>(logits: &Tensor<E>, target: &LabelMap) -> Result<(E, Tensor<E>)> {
    let classes = logits.dim(1);
    if classes != PARSE_CLASSES {
        return Err(Error::Shape(format!("expected {PARSE_CLASSES} parse channels, got {classes}")));
    }
    let one_hot = target.one_hot::<E>(classes)?;
    softmax_cross_entropy(logits, &one_hot)
}
