//! Segmentation-stage training: a U-Net predicts the full-body parse of the
//! person wearing the target garment from the clothing-agnostic parse, the
//! pose map, and the flat garment image. Adversarial supervision (least
//! squares, two-scale patch discriminator) is combined with weighted pixel
//! cross entropy against the ground-truth parse.
//!
//! The stage runs at half the working resolution; the command layer
//! upscales predictions before the later stages consume them.

use crate::config::TrainConfig;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::{LabelMap, AGNOSTIC_CLASSES, PARSE_CLASSES};
use crate::nets::alias::one_hot_batch;
use crate::nets::patchgan::PatchDiscriminator;
use crate::nets::unet::UNet;
use crate::ops::resize::downsample_area_to;
use crate::ops::softmax::{softmax_channels, softmax_channels_backward, softmax_cross_entropy};
use crate::param::Optimizer;
use crate::rng::stream;
use crate::tensor::Tensor;

use super::{batch_indices, lsgan_d_fake, lsgan_d_real, Trace, TrainSample};
use crate::losses::lsgan_g_loss;

/// Generator input channels: agnostic parse one-hot + pose + garment.
pub const SEG_IN_CH: usize = AGNOSTIC_CLASSES + 6;
/// Discriminator input: condition (agnostic parse + pose + garment) plus the
/// real-or-predicted parse probabilities.
pub const SEG_D_CH: usize = AGNOSTIC_CLASSES + PARSE_CLASSES + 6;
/// Leading channels that downsample by nearest neighbor inside the
/// discriminator (the label-like part of its input).
pub const SEG_D_LABEL_CH: usize = AGNOSTIC_CLASSES + PARSE_CLASSES;
pub const SEG_UNET_BASE: usize = 32;

/// One sample's stage inputs at half resolution.
pub struct SegInputs<E: Element> {
    /// [1, 16, h/2, w/2] U-Net input.
    pub x: Tensor<E>,
    /// Ground-truth parse at half resolution (training target).
    pub target: LabelMap,
    /// Target parse as one-hot probabilities (discriminator real branch).
    pub real_probs: Tensor<E>,
    /// Agnostic-parse one-hot, kept for discriminator conditioning.
    pub sa: Tensor<E>,
    pub pose: Tensor<E>,
    pub cloth: Tensor<E>,
}

/// Downscale and encode one sample for this stage.
pub fn seg_inputs<E: Element>(s: &TrainSample<E>) -> Result<SegInputs<E>> {
    let (h, w) = (s.image.dim(2), s.image.dim(3));
    let (h2, w2) = (h / 2, w / 2);
    let sa = s.seg_a.resize_nearest(h2, w2)?.one_hot::<E>(AGNOSTIC_CLASSES)?;
    let pose = downsample_area_to(&s.pose, h2, w2);
    let cloth = downsample_area_to(&s.cloth, h2, w2);
    let target = s.seg.resize_nearest(h2, w2)?;
    if target.max_label() >= PARSE_CLASSES as u8 {
        return Err(Error::InvalidArgument(format!(
            "sample {} target parse carries synthetic labels >= {PARSE_CLASSES}",
            s.id
        )));
    }
    let real_probs = target.one_hot::<E>(PARSE_CLASSES)?;
    let x = Tensor::concat_channels(&[&sa, &pose, &cloth])?;
    Ok(SegInputs { x, target, real_probs, sa, pose, cloth })
}

pub struct SegRun<E: Element> {
    pub unet: UNet<E>,
    pub disc: PatchDiscriminator<E>,
    pub trace: Trace,
}

/// Fresh stage networks from the run seed (the same constructor order is
/// used when restoring checkpoints, so parameter names always line up).
pub fn seg_nets<E: Element>(seed: u64) -> (UNet<E>, PatchDiscriminator<E>) {
    let r = &mut stream(seed, "train-seg");
    let unet = UNet::new(r, "seg", SEG_IN_CH, SEG_UNET_BASE, PARSE_CLASSES);
    let disc = PatchDiscriminator::new(r, "segd", SEG_D_CH, SEG_D_LABEL_CH);
    (unet, disc)
}

pub fn train_seg<E: Element>(cfg: &TrainConfig, samples: &[TrainSample<E>]) -> Result<SegRun<E>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("segmentation training needs samples".into()));
    }
    let prepared: Vec<SegInputs<E>> = samples.iter().map(seg_inputs).collect::<Result<_>>()?;
    let (mut unet, mut disc) = seg_nets::<E>(cfg.seed);
    let mut opt_g = Optimizer::new(cfg.lr_seg, cfg.seg_beta1, cfg.seg_beta2);
    let mut opt_d = Optimizer::new(cfg.lr_seg, cfg.seg_beta1, cfg.seg_beta2);
    let lambda_ce = E::from_f64(cfg.lambda_ce);
    let mut trace = Trace::new("seg", &["d_real", "d_fake", "g_adv", "ce"]);

    for it in 0..cfg.seg_iters {
        let idx = batch_indices(it, cfg.batch, prepared.len());
        let gather = |f: fn(&SegInputs<E>) -> &Tensor<E>| -> Result<Tensor<E>> {
            let parts: Vec<&Tensor<E>> = idx.iter().map(|&i| f(&prepared[i])).collect();
            Tensor::concat_batch(&parts)
        };
        let x = gather(|p| &p.x)?;
        let sa = gather(|p| &p.sa)?;
        let pose = gather(|p| &p.pose)?;
        let cloth = gather(|p| &p.cloth)?;
        let real_probs = gather(|p| &p.real_probs)?;
        let targets: Vec<LabelMap> = idx.iter().map(|&i| prepared[i].target.clone()).collect();
        let target_hot = one_hot_batch::<E>(&targets, PARSE_CLASSES)?;

        disc.sn_iterate();

        // generator step against the current discriminator
        opt_g.zero_grad(&mut unet);
        let logits = unet.forward(&x);
        let probs = softmax_channels(&logits);
        let fake_in = Tensor::concat_channels(&[&sa, &probs, &pose, &cloth])?;
        let real_in = Tensor::concat_channels(&[&sa, &real_probs, &pose, &cloth])?;
        let fake_scores = disc.forward(&fake_in);
        let (l_adv, g_scores) = lsgan_g_loss(&fake_scores);
        let gx = disc.backward_input(&g_scores, None, SEG_D_CH);
        let g_probs = gx.slice_channels(AGNOSTIC_CLASSES, PARSE_CLASSES)?;
        let g_logits_adv = softmax_channels_backward(&probs, &g_probs);
        let (l_ce, g_logits_ce) = softmax_cross_entropy(&logits, &target_hot)?;
        let mut g_logits = g_logits_adv;
        g_logits.add_scaled_assign(&g_logits_ce, lambda_ce);
        unet.backward(&g_logits);
        opt_g.step(&mut unet);

        // discriminator step; the prediction is data here
        opt_d.zero_grad(&mut disc);
        let real_scores = disc.forward(&real_in);
        let (l_dr, g_real) = lsgan_d_real(&real_scores);
        disc.backward(&g_real);
        let fake_scores_d = disc.forward(&fake_in);
        let (l_df, g_fake) = lsgan_d_fake(&fake_scores_d);
        disc.backward(&g_fake);
        opt_d.step(&mut disc);

        trace.push(it, &[l_dr.to_f64(), l_df.to_f64(), l_adv.to_f64(), l_ce.to_f64()])?;
    }
    Ok(SegRun { unet, disc, trace })
}

/// Predict a sample's parse at half resolution with a trained network.
pub fn predict_parse<E: Element>(unet: &mut UNet<E>, s: &TrainSample<E>) -> Result<LabelMap> {
    let inputs = seg_inputs(s)?;
    let logits = unet.forward(&inputs.x);
    Ok(LabelMap::from_argmax(&logits))
}

/// Fraction of pixels whose predicted label matches the target.
pub fn parse_accuracy(pred: &LabelMap, target: &LabelMap) -> f64 {
    assert_eq!((pred.h(), pred.w()), (target.h(), target.w()));
    let hits = pred.data().iter().zip(target.data()).filter(|(a, b)| a == b).count();
    hits as f64 / pred.data().len() as f64
}
