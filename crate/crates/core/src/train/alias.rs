//! Synthesis-stage training: the generator fuses the clothing-agnostic
//! photo, the pose map, and the warped garment into the final try-on
//! image. Garment pixels the warp failed to cover are tracked as an
//! explicit misalignment region; the generator's normalization layers
//! standardize that region separately so leftover warp errors cannot
//! leak through the modulation statistics.
//!
//! Adversarial training uses hinge losses with a two-scale patch
//! discriminator conditioned on the divided segmentation, plus feature
//! matching on the discriminator pyramid and a perceptual distance on a
//! frozen random feature stack.

use crate::config::TrainConfig;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::{LabelMap, DIVIDED_CLASSES, UPPER};
use crate::losses::{feature_matching, hinge_g_loss};
use crate::masks::{divide_parse, split_alignment, Mask};
use crate::nets::alias::{AliasGenerator, GenInput};
use crate::nets::features::FeatureExtractor;
use crate::nets::gmm::GmmNet;
use crate::nets::patchgan::PatchDiscriminator;
use crate::param::Optimizer;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tps::TpsWarper;

use super::gmm::gmm_inputs;
use super::{batch_indices, hinge_d_fake, hinge_d_real, Trace, TrainSample};

/// Discriminator input width: divided segmentation one-hot plus RGB.
pub const ALIAS_D_CH: usize = DIVIDED_CLASSES + 3;

/// One sample's synthesis-stage inputs at full resolution.
pub struct AliasInputs<E: Element> {
    pub image: Tensor<E>,
    pub agnostic: Tensor<E>,
    pub pose: Tensor<E>,
    /// Garment warped onto the body by the predicted spline.
    pub warped: Tensor<E>,
    /// Segmentation with the garment region split into aligned /
    /// misaligned classes.
    pub s_div: LabelMap,
    pub misalign: Mask,
    /// One-hot of `s_div`, the discriminator conditioning.
    pub sdiv_hot: Tensor<E>,
}

/// Prepare one sample: predict spline offsets at half resolution, apply
/// them at full resolution, and split the garment region by alignment.
pub fn alias_inputs<E: Element>(
    s: &TrainSample<E>,
    gmm: &mut GmmNet<E>,
    warper_full: &TpsWarper<E>,
) -> Result<AliasInputs<E>> {
    let gin = gmm_inputs(s)?;
    let theta = gmm.forward(&gin.person, &gin.cloth)?;
    let warped = warper_full.warp(&s.cloth, &theta)?;
    let warped_mask = warper_full.warp_mask(&s.cloth_mask, &theta)?;
    let target_region = Mask::from_label(&s.seg, UPPER);
    let split = split_alignment(&target_region, &warped_mask);
    let s_div = divide_parse(&s.seg, UPPER, &split)?;
    let sdiv_hot = s_div.one_hot(DIVIDED_CLASSES)?;
    Ok(AliasInputs {
        image: s.image.clone(),
        agnostic: s.image_a.clone(),
        pose: s.pose.clone(),
        warped,
        s_div,
        misalign: split.misalign,
        sdiv_hot,
    })
}

pub struct AliasRun<E: Element> {
    pub gen: AliasGenerator<E>,
    pub disc: PatchDiscriminator<E>,
    pub trace: Trace,
}

pub fn train_alias<E: Element>(
    cfg: &TrainConfig,
    samples: &[TrainSample<E>],
    gmm: &mut GmmNet<E>,
) -> Result<AliasRun<E>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("synthesis training needs samples".into()));
    }
    let warper_full = TpsWarper::<E>::new(cfg.h, cfg.w);
    let prepared: Vec<AliasInputs<E>> =
        samples.iter().map(|s| alias_inputs(s, gmm, &warper_full)).collect::<Result<_>>()?;

    let r = &mut stream(cfg.seed, "train-alias");
    let mut gen = AliasGenerator::<E>::new(r, cfg.h, cfg.w, cfg.norm_mode);
    let mut disc = PatchDiscriminator::<E>::new(r, "aliasd", ALIAS_D_CH, DIVIDED_CLASSES);
    let mut opt_g = Optimizer::new(cfg.lr_alias_g, cfg.alias_beta1, cfg.alias_beta2);
    let mut opt_d = Optimizer::new(cfg.lr_alias_d, cfg.alias_beta1, cfg.alias_beta2);
    let mut features = FeatureExtractor::<E>::new();
    let lambda_fm = E::from_f64(cfg.lambda_fm);
    let lambda_percept = E::from_f64(cfg.lambda_percept);
    let mut trace =
        Trace::new("alias", &["d_real", "d_fake", "g_adv", "fm", "percept", "recon_l1"]);

    for it in 0..cfg.alias_iters {
        let idx = batch_indices(it, cfg.batch, prepared.len());
        let gather = |f: fn(&AliasInputs<E>) -> &Tensor<E>| -> Result<Tensor<E>> {
            let parts: Vec<&Tensor<E>> = idx.iter().map(|&i| f(&prepared[i])).collect();
            Tensor::concat_batch(&parts)
        };
        let image = gather(|p| &p.image)?;
        let agnostic = gather(|p| &p.agnostic)?;
        let pose = gather(|p| &p.pose)?;
        let warped = gather(|p| &p.warped)?;
        let sdiv_hot = gather(|p| &p.sdiv_hot)?;
        let s_div: Vec<LabelMap> = idx.iter().map(|&i| prepared[i].s_div.clone()).collect();
        let misalign: Vec<Mask> = idx.iter().map(|&i| prepared[i].misalign.clone()).collect();

        disc.sn_iterate();

        // generator step; the real pass runs first so the discriminator's
        // activation caches hold the fake pass when we differentiate it
        let out = gen.forward(&GenInput {
            agnostic: &agnostic,
            pose: &pose,
            warped: &warped,
            s_div: &s_div,
            misalign: &misalign,
        })?;
        let real_in = Tensor::concat_channels(&[&sdiv_hot, &image])?;
        let fake_in = Tensor::concat_channels(&[&sdiv_hot, &out])?;
        disc.forward(&real_in);
        let real_feats = disc.features();
        let fake_scores = disc.forward(&fake_in);
        let fake_feats = disc.features();
        let (l_adv, g_scores) = hinge_g_loss(&fake_scores);
        let (l_fm, mut g_feats) = feature_matching(&real_feats, &fake_feats)?;
        for scale in &mut g_feats {
            for t in scale.iter_mut() {
                *t = t.scale(lambda_fm);
            }
        }
        let gx = disc.backward_input(&g_scores, Some(&g_feats), ALIAS_D_CH);
        let mut g_out = gx.slice_channels(DIVIDED_CLASSES, 3)?;
        let (l_percept, g_percept) = features.perceptual(&out, &image);
        g_out.add_scaled_assign(&g_percept, lambda_percept);
        opt_g.zero_grad(&mut gen);
        gen.backward(&g_out)?;
        opt_g.step(&mut gen);

        // discriminator step: real and fake passes back to back
        opt_d.zero_grad(&mut disc);
        let scores = disc.forward(&real_in);
        let (l_dr, g_r) = hinge_d_real(&scores);
        disc.backward(&g_r);
        let scores = disc.forward(&fake_in);
        let (l_df, g_f) = hinge_d_fake(&scores);
        disc.backward(&g_f);
        opt_d.step(&mut disc);

        let n = out.data().len();
        let recon = out
            .data()
            .iter()
            .zip(image.data())
            .map(|(&o, &t)| (o - t).to_f64().abs())
            .sum::<f64>()
            / n as f64;
        trace.push(
            it,
            &[
                l_dr.to_f64(),
                l_df.to_f64(),
                l_adv.to_f64(),
                l_fm.to_f64(),
                l_percept.to_f64(),
                recon,
            ],
        )?;
    }
    Ok(AliasRun { gen, disc, trace })
}

/// Run the generator on one prepared sample.
pub fn synthesize<E: Element>(
    gen: &mut AliasGenerator<E>,
    inputs: &AliasInputs<E>,
) -> Result<Tensor<E>> {
    let s_div = [inputs.s_div.clone()];
    let misalign = [inputs.misalign.clone()];
    gen.forward(&GenInput {
        agnostic: &inputs.agnostic,
        pose: &inputs.pose,
        warped: &inputs.warped,
        s_div: &s_div,
        misalign: &misalign,
    })
}
