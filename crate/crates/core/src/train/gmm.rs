//! Warp-stage training: the matcher regresses spline control offsets that
//! deform the flat garment toward its on-body appearance. Supervision is
//! masked L1 between the warped garment and the person photo over the
//! garment region, plus the grid-regularity penalty that keeps neighboring
//! control cells consistent.
//!
//! Like the segmentation stage this runs at half the working resolution;
//! the predicted offsets are resolution-free (normalized coordinates), so
//! later stages can apply them at full resolution directly.

use crate::config::TrainConfig;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::UPPER;
use crate::masks::Mask;
use crate::nets::gmm::GmmNet;
use crate::ops::resize::downsample_area_to;
use crate::param::Optimizer;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tps::{const_loss, TpsWarper, TPS_GRID_N};

use super::{batch_indices, Trace, TrainSample};

/// One sample's stage inputs at half resolution.
pub struct GmmInputs<E: Element> {
    /// [1, 7, h/2, w/2]: agnostic photo, pose map, garment-region mask.
    pub person: Tensor<E>,
    /// [1, 3, h/2, w/2] flat garment.
    pub cloth: Tensor<E>,
    /// [1, 3, h/2, w/2] person photo (warp target).
    pub target: Tensor<E>,
    /// On-body garment region at half resolution.
    pub region: Mask,
}

pub fn gmm_inputs<E: Element>(s: &TrainSample<E>) -> Result<GmmInputs<E>> {
    let (h, w) = (s.image.dim(2), s.image.dim(3));
    let (h2, w2) = (h / 2, w / 2);
    let image_a = downsample_area_to(&s.image_a, h2, w2);
    let pose = downsample_area_to(&s.pose, h2, w2);
    let region = Mask::from_label(&s.seg, UPPER).resize_nearest(h2, w2)?;
    let person = Tensor::concat_channels(&[&image_a, &pose, &region.to_tensor::<E>()])?;
    Ok(GmmInputs {
        person,
        cloth: downsample_area_to(&s.cloth, h2, w2),
        target: downsample_area_to(&s.image, h2, w2),
        region,
    })
}

/// Batched grid-regularity loss: mean over samples, gradients stacked.
pub fn const_loss_batch<E: Element>(theta: &Tensor<E>) -> Result<(E, Tensor<E>)> {
    let n = theta.dim(0);
    let scale = E::ONE / E::from_usize(n);
    let mut total = E::ZERO;
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let (l, g) = const_loss(&theta.slice_batch(k)?)?;
        total += l * scale;
        grads.push(g.scale(scale));
    }
    let refs: Vec<&Tensor<E>> = grads.iter().collect();
    Ok((total, Tensor::concat_batch(&refs)?))
}

/// Mean per-sample masked L1 with per-sample masks; gradients w.r.t. `a`.
pub fn masked_l1_batch<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    masks: &[&Mask],
) -> Result<(E, Tensor<E>)> {
    let n = a.dim(0);
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for batch of {n}", masks.len())));
    }
    let scale = E::ONE / E::from_usize(n);
    let mut total = E::ZERO;
    let mut grads = Vec::with_capacity(n);
    for k in 0..n {
        let (l, g, _empty) =
            crate::losses::masked_l1(&a.slice_batch(k)?, &b.slice_batch(k)?, masks[k]);
        total += l * scale;
        grads.push(g.scale(scale));
    }
    let refs: Vec<&Tensor<E>> = grads.iter().collect();
    Ok((total, Tensor::concat_batch(&refs)?))
}

pub struct GmmRun<E: Element> {
    pub net: GmmNet<E>,
    pub trace: Trace,
}

pub fn gmm_net<E: Element>(seed: u64, h2: usize, w2: usize) -> GmmNet<E> {
    let r = &mut stream(seed, "train-gmm");
    GmmNet::new(r, h2, w2)
}

pub fn train_gmm<E: Element>(cfg: &TrainConfig, samples: &[TrainSample<E>]) -> Result<GmmRun<E>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("warp training needs samples".into()));
    }
    let (h2, w2) = cfg.half_res();
    let prepared: Vec<GmmInputs<E>> = samples.iter().map(gmm_inputs).collect::<Result<_>>()?;
    let warper = TpsWarper::<E>::new(h2, w2);
    let mut net = gmm_net::<E>(cfg.seed, h2, w2);
    let mut opt = Optimizer::new(cfg.lr_gmm, cfg.gmm_beta1, cfg.gmm_beta2);
    let lambda_const = E::from_f64(cfg.lambda_const);
    let mut trace = Trace::new("gmm", &["warp_l1", "const", "identity_l1"]);

    for it in 0..cfg.gmm_iters {
        let idx = batch_indices(it, cfg.batch, prepared.len());
        let gather = |f: fn(&GmmInputs<E>) -> &Tensor<E>| -> Result<Tensor<E>> {
            let parts: Vec<&Tensor<E>> = idx.iter().map(|&i| f(&prepared[i])).collect();
            Tensor::concat_batch(&parts)
        };
        let person = gather(|p| &p.person)?;
        let cloth = gather(|p| &p.cloth)?;
        let target = gather(|p| &p.target)?;
        let masks: Vec<&Mask> = idx.iter().map(|&i| &prepared[i].region).collect();

        opt.zero_grad(&mut net);
        let theta = net.forward(&person, &cloth)?;
        let warped = warper.warp(&cloth, &theta)?;
        let (l_warp, g_warped) = masked_l1_batch(&warped, &target, &masks)?;
        let (l_const, g_theta_const) = const_loss_batch(&theta)?;
        let (_g_cloth, mut g_theta) = warper.warp_backward(&cloth, &theta, &g_warped)?;
        g_theta.add_scaled_assign(&g_theta_const, lambda_const);
        net.backward(&g_theta)?;
        opt.step(&mut net);

        // reference column: how the untransformed garment scores on the
        // same batch, the baseline any useful warp must beat
        let (l_id, _) = masked_l1_batch(&cloth, &target, &masks)?;
        trace.push(it, &[l_warp.to_f64(), l_const.to_f64(), l_id.to_f64()])?;
    }
    Ok(GmmRun { net, trace })
}

/// Predicted control offsets for one sample.
pub fn predict_theta<E: Element>(net: &mut GmmNet<E>, s: &TrainSample<E>) -> Result<Tensor<E>> {
    let inputs = gmm_inputs(s)?;
    net.forward(&inputs.person, &inputs.cloth)
}

/// Control offsets as nested rows for JSON export: [2][5][5].
pub fn theta_to_rows<E: Element>(theta: &Tensor<E>) -> Vec<Vec<Vec<f64>>> {
    assert_eq!(theta.shape(), &[1, 2, TPS_GRID_N, TPS_GRID_N]);
    (0..2)
        .map(|axis| {
            (0..TPS_GRID_N)
                .map(|gy| {
                    (0..TPS_GRID_N)
                        .map(|gx| theta.at4(0, axis, gy, gx).to_f64())
                        .collect()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg(iters: usize) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.h = 32;
        cfg.w = 32;
        cfg.batch = 2;
        cfg.gmm_iters = iters;
        cfg.seed = 51;
        cfg
    }

    fn tiny_samples(n: u64) -> Vec<TrainSample<f32>> {
        (0..n).map(|s| TrainSample::synthetic(900 + s, 32, 32, 2)).collect()
    }

    #[test]
    fn short_run_is_deterministic_and_finite() {
        let cfg = tiny_cfg(3);
        let samples = tiny_samples(3);
        let a = train_gmm(&cfg, &samples).unwrap();
        let b = train_gmm(&cfg, &samples).unwrap();
        assert_eq!(a.trace.csv(), b.trace.csv());
        assert_eq!(a.trace.rows.len(), 3);
    }

    #[test]
    fn first_iteration_starts_at_the_identity_baseline() {
        let cfg = tiny_cfg(6);
        let samples = tiny_samples(2);
        let run = train_gmm(&cfg, &samples).unwrap();
        let warp = run.trace.column("warp_l1");
        let ident = run.trace.column("identity_l1");
        // the offset head starts at zero, so the first batch is scored on an
        // (almost exactly) identity warp
        assert!((warp[0] - ident[0]).abs() < 1e-5, "{} vs {}", warp[0], ident[0]);
        // ...and the optimizer must move the warp away from identity
        assert!(
            run.trace.rows.iter().skip(1).any(|r| (r[0] - r[2]).abs() > 1e-6),
            "training never left the identity warp"
        );
    }

    #[test]
    fn one_iteration_checkpoint_round_trips_bit_identically() {
        let cfg = tiny_cfg(1);
        let samples = tiny_samples(1);
        let mut run = train_gmm(&cfg, &samples).unwrap();
        let dir = std::env::temp_dir().join("tryon-gmm-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("g1.ck");
        let p2 = dir.join("g2.ck");
        crate::checkpoint::save_net(&p1, &mut run.net).unwrap();
        let mut fresh = gmm_net::<f32>(777, 16, 16);
        crate::checkpoint::load_net(&p1, &mut fresh).unwrap();
        crate::checkpoint::save_net(&p2, &mut fresh).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn exported_offsets_keep_their_layout() {
        let cfg = tiny_cfg(1);
        let samples = tiny_samples(1);
        let mut run = train_gmm(&cfg, &samples).unwrap();
        let theta = predict_theta(&mut run.net, &samples[0]).unwrap();
        assert_eq!(theta.shape(), &[1, 2, 5, 5]);
        let rows = theta_to_rows(&theta);
        assert_eq!((rows.len(), rows[0].len(), rows[0][0].len()), (2, 5, 5));
        assert_eq!(rows[1][4][4], theta.at4(0, 1, 4, 4) as f64);
    }
}
