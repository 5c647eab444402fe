//! Finite-difference audit of every analytic backward pass in the crate.
//!
//! Each row perturbs one input of one operation coordinate by coordinate,
//! compares the symmetric difference quotient against the analytic
//! gradient, and records the worst relative error. The audit runs in
//! 64-bit regardless of the training scalar type, so the difference
//! quotient itself is trustworthy at the tolerance used.
//!
//! Piecewise-linear operations (rectifiers, hinges) are probed with inputs
//! held away from their kinks; the perturbation would otherwise step
//! across a non-differentiable point and the quotient would be
//! meaningless.

use rand_chacha::ChaCha8Rng;

use crate::label::{LabelMap, DIVIDED_CLASSES};
use crate::losses::{
    feature_matching, hinge_g_loss, lsgan_g_loss, masked_l1,
};
use crate::masks::Mask;
use crate::nets::alias::{alias_standardize, alias_standardize_backward, AliasResBlk, NormMode};
use crate::nets::features::FeatureExtractor;
use crate::nets::gmm::{correlation, correlation_backward, GmmNet};
use crate::nets::patchgan::PatchDiscriminator;
use crate::nets::unet::UNet;
use crate::ops::activ::{
    leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, tanh,
    tanh_backward,
};
use crate::ops::conv::{conv2d, conv2d_backward};
use crate::ops::gradcheck::{check_grad, GRADCHECK_EPS, GRADCHECK_TOL};
use crate::ops::norm::{instance_norm, instance_norm_backward};
use crate::ops::resize::{
    downsample_area_2x, downsample_area_2x_backward, downsample_nearest_2x,
    downsample_nearest_2x_backward, upsample_nearest_2x, upsample_nearest_2x_backward,
};
use crate::ops::sampler::{grid_sample, grid_sample_backward};
use crate::ops::softmax::{softmax_channels, softmax_channels_backward, softmax_cross_entropy};
use crate::ops::spectral::{normalized, normalized_backward, power_iterate};
use crate::rng::{randn, stream, uniform};
use crate::tensor::Tensor;
use crate::tps::{const_loss, TpsWarper};
use crate::train::{hinge_d_fake, hinge_d_real, lsgan_d_fake, lsgan_d_real};

/// One audited gradient path: worst relative error over all probed seeds.
#[derive(Clone, Debug)]
pub struct AuditRow {
    pub name: &'static str,
    pub worst: f64,
}

impl AuditRow {
    pub fn pass(&self) -> bool {
        self.worst < GRADCHECK_TOL
    }
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_mask(r: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> Mask {
    let probs = uniform::<f64>(r, &[h * w], 0.0, 1.0);
    let data = probs.data().iter().map(|&v| u8::from(v < p)).collect();
    Mask::new(h, w, data).expect("mask dims match data")
}

fn random_labels(r: &mut ChaCha8Rng, h: usize, w: usize, classes: u8) -> LabelMap {
    let probs = uniform::<f64>(r, &[h * w], 0.0, classes as f64);
    let data = probs.data().iter().map(|&v| (v as u8).min(classes - 1)).collect();
    LabelMap::new(h, w, data).expect("label dims match data")
}

/// Values bounded away from zero so rectifier kinks are never straddled.
fn off_kink(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform::<f64>(r, shape, 0.2, 1.2);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v = -*v;
        }
    }
    t
}

/// Scores alternating between the active and inactive side of a unit
/// hinge, with a wide margin around the kink at |s| = 1.
fn hinge_scores(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform::<f64>(r, shape, -0.5, 0.5);
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        if i % 2 == 0 {
            *v += 2.0;
        }
    }
    t
}

struct Audit {
    rows: Vec<AuditRow>,
}

impl Audit {
    fn record(&mut self, name: &'static str, worst: f64) {
        match self.rows.iter_mut().find(|r| r.name == name) {
            Some(row) => row.worst = row.worst.max(worst),
            None => self.rows.push(AuditRow { name, worst }),
        }
    }

    /// Check a loss-style path: `f` returns the scalar; `analytic` is the
    /// gradient at `x` as reported by the operation under audit.
    fn check(
        &mut self,
        name: &'static str,
        x: &Tensor<f64>,
        analytic: &Tensor<f64>,
        f: impl FnMut(&Tensor<f64>) -> f64,
    ) {
        self.record(name, check_grad(x, analytic, GRADCHECK_EPS, f));
    }
}

fn audit_seed(a: &mut Audit, seed: u64) {
    let r = &mut stream(seed, "audit");

    // convolution, unit stride
    {
        let x = randn::<f64>(r, &[1, 2, 5, 4], 1.0);
        let w = randn::<f64>(r, &[3, 2, 3, 3], 0.5);
        let b = randn::<f64>(r, &[3], 0.5);
        let gy = randn::<f64>(r, &[1, 3, 5, 4], 1.0);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &gy, 1, 1).expect("audit conv shapes");
        a.check("convolution (unit stride) image", &x, &gx, |p| {
            dot(&conv2d(p, &w, &b, 1, 1).unwrap(), &gy)
        });
        a.check("convolution (unit stride) kernel", &w, &gw, |p| {
            dot(&conv2d(&x, p, &b, 1, 1).unwrap(), &gy)
        });
        a.check("convolution (unit stride) bias", &b, &gb, |p| {
            dot(&conv2d(&x, &w, p, 1, 1).unwrap(), &gy)
        });
    }

    // convolution, stride two
    {
        let x = randn::<f64>(r, &[1, 2, 6, 6], 1.0);
        let w = randn::<f64>(r, &[3, 2, 4, 4], 0.5);
        let b = randn::<f64>(r, &[3], 0.5);
        let gy = randn::<f64>(r, &[1, 3, 3, 3], 1.0);
        let (gx, gw, _) = conv2d_backward(&x, &w, &gy, 2, 1).expect("audit conv shapes");
        a.check("convolution (stride two) image", &x, &gx, |p| {
            dot(&conv2d(p, &w, &b, 2, 1).unwrap(), &gy)
        });
        a.check("convolution (stride two) kernel", &w, &gw, |p| {
            dot(&conv2d(&x, p, &b, 2, 1).unwrap(), &gy)
        });
    }

    // instance normalization
    {
        let x = randn::<f64>(r, &[2, 3, 4, 4], 1.0);
        let gamma = uniform::<f64>(r, &[3], 0.5, 1.5);
        let beta = randn::<f64>(r, &[3], 0.5);
        let gy = randn::<f64>(r, &[2, 3, 4, 4], 1.0);
        let (_, cache) = instance_norm(&x, &gamma, &beta);
        let (gx, gg, gb) = instance_norm_backward(&x, &gamma, &cache, &gy);
        a.check("instance normalization input", &x, &gx, |p| {
            dot(&instance_norm(p, &gamma, &beta).0, &gy)
        });
        a.check("instance normalization gain", &gamma, &gg, |p| {
            dot(&instance_norm(&x, p, &beta).0, &gy)
        });
        a.check("instance normalization shift", &beta, &gb, |p| {
            dot(&instance_norm(&x, &gamma, p).0, &gy)
        });
    }

    // region-conditioned standardization
    {
        let x = randn::<f64>(r, &[2, 3, 6, 5], 1.0);
        let gy = randn::<f64>(r, &[2, 3, 6, 5], 1.0);
        let masks = vec![random_mask(r, 6, 5, 0.4), random_mask(r, 6, 5, 0.4)];
        for (name, mode) in [
            ("standardization (region-wise) input", NormMode::RegionWise),
            ("standardization (channel-wise) input", NormMode::ChannelWise),
        ] {
            let (_, cache) = alias_standardize(&x, &masks, mode).expect("audit standardize");
            let gx = alias_standardize_backward(&cache, &gy);
            a.check(name, &x, &gx, |p| {
                dot(&alias_standardize(p, &masks, mode).unwrap().0, &gy)
            });
        }
    }

    // activations
    {
        let x = off_kink(r, &[1, 2, 4, 3]);
        let gy = randn::<f64>(r, &[1, 2, 4, 3], 1.0);
        a.check("rectifier input", &x, &relu_backward(&x, &gy), |p| dot(&relu(p), &gy));
        a.check("leaky rectifier input", &x, &leaky_relu_backward(&x, &gy, 0.2), |p| {
            dot(&leaky_relu(p, 0.2), &gy)
        });
        let xs = randn::<f64>(r, &[1, 2, 4, 3], 1.0);
        a.check("tanh input", &xs, &tanh_backward(&tanh(&xs), &gy), |p| dot(&tanh(p), &gy));
        a.check("sigmoid input", &xs, &sigmoid_backward(&sigmoid(&xs), &gy), |p| {
            dot(&sigmoid(p), &gy)
        });
    }

    // channel softmax and cross-entropy
    {
        let x = randn::<f64>(r, &[1, 4, 3, 3], 1.0);
        let gy = randn::<f64>(r, &[1, 4, 3, 3], 1.0);
        let probs = softmax_channels(&x);
        let gx = softmax_channels_backward(&probs, &gy);
        a.check("channel softmax input", &x, &gx, |p| dot(&softmax_channels(p), &gy));

        let target = random_labels(r, 3, 3, 4).one_hot::<f64>(4).expect("audit one-hot");
        let (_, g_ce) = softmax_cross_entropy(&x, &target).expect("audit ce shapes");
        a.check("cross-entropy logits", &x, &g_ce, |p| {
            softmax_cross_entropy(p, &target).unwrap().0
        });
    }

    // resampling (all linear; backward must be exact)
    {
        let x = randn::<f64>(r, &[1, 2, 4, 4], 1.0);
        let gy_up = randn::<f64>(r, &[1, 2, 8, 8], 1.0);
        let gy_down = randn::<f64>(r, &[1, 2, 2, 2], 1.0);
        a.check("nearest upsample input", &x, &upsample_nearest_2x_backward(&gy_up), |p| {
            dot(&upsample_nearest_2x(p), &gy_up)
        });
        a.check("area downsample input", &x, &downsample_area_2x_backward(&gy_down), |p| {
            dot(&downsample_area_2x(p), &gy_down)
        });
        a.check("nearest downsample input", &x, &downsample_nearest_2x_backward(&gy_down), |p| {
            dot(&downsample_nearest_2x(p), &gy_down)
        });
    }

    // bilinear sampling
    {
        let x = randn::<f64>(r, &[1, 2, 5, 5], 1.0);
        let grid = uniform::<f64>(r, &[1, 2, 4, 4], -0.9, 0.9);
        let gy = randn::<f64>(r, &[1, 2, 4, 4], 1.0);
        let (gx, gg) = grid_sample_backward(&x, &grid, &gy).expect("audit sampler shapes");
        a.check("bilinear sampler image", &x, &gx, |p| {
            dot(&grid_sample(p, &grid).unwrap(), &gy)
        });
        a.check("bilinear sampler coordinates", &grid, &gg, |p| {
            dot(&grid_sample(&x, p).unwrap(), &gy)
        });
    }

    // spectral weight normalization (power vectors held fixed)
    {
        let w = randn::<f64>(r, &[4, 2, 3, 3], 0.7);
        let mut u = vec![0.0; 4];
        let mut v = vec![0.0; 18];
        let seed_u = randn::<f64>(r, &[4], 1.0);
        u.copy_from_slice(seed_u.data());
        power_iterate(&w, &mut u, &mut v);
        power_iterate(&w, &mut u, &mut v);
        let gy = randn::<f64>(r, &[4, 2, 3, 3], 1.0);
        let gw = normalized_backward(&w, &u, &v, &gy);
        a.check("spectral weight scaling", &w, &gw, |p| dot(&normalized(p, &u, &v).0, &gy));
    }

    // spline warping
    {
        let warper = TpsWarper::<f64>::new(6, 5);
        let theta = randn::<f64>(r, &[1, 2, 5, 5], 0.1);
        let img = randn::<f64>(r, &[1, 3, 6, 5], 1.0);
        let gy_grid = randn::<f64>(r, &[1, 2, 6, 5], 1.0);
        let g_theta = warper.grid_backward(&gy_grid);
        a.check("spline grid offsets", &theta, &g_theta, |p| {
            dot(&warper.grid(p).unwrap(), &gy_grid)
        });

        let gy_img = randn::<f64>(r, &[1, 3, 6, 5], 1.0);
        let (g_img, g_theta_w) =
            warper.warp_backward(&img, &theta, &gy_img).expect("audit warp shapes");
        a.check("spline warp image", &img, &g_img, |p| {
            dot(&warper.warp(p, &theta).unwrap(), &gy_img)
        });
        a.check("spline warp offsets", &theta, &g_theta_w, |p| {
            dot(&warper.warp(&img, p).unwrap(), &gy_img)
        });

        let (_, g_const) = const_loss(&theta).expect("audit offsets shape");
        a.check("grid regularity offsets", &theta, &g_const, |p| const_loss(p).unwrap().0);
    }

    // feature correlation
    {
        let fa = randn::<f64>(r, &[1, 3, 4, 4], 1.0);
        let fb = randn::<f64>(r, &[1, 3, 4, 4], 1.0);
        let gy = randn::<f64>(r, &[1, 16, 4, 4], 1.0);
        let (ga, gb) = correlation_backward(&fa, &fb, &gy).expect("audit correlation shapes");
        a.check("feature correlation lhs", &fa, &ga, |p| {
            dot(&correlation(p, &fb).unwrap(), &gy)
        });
        a.check("feature correlation rhs", &fb, &gb, |p| {
            dot(&correlation(&fa, p).unwrap(), &gy)
        });
    }

    // reconstruction and adversarial losses
    {
        let x = randn::<f64>(r, &[1, 3, 5, 4], 1.0);
        let t = randn::<f64>(r, &[1, 3, 5, 4], 1.0);
        let mask = random_mask(r, 5, 4, 0.5);
        let (_, g, _) = masked_l1(&x, &t, &mask);
        a.check("masked absolute difference input", &x, &g, |p| masked_l1(p, &t, &mask).0);

        let s0 = randn::<f64>(r, &[1, 1, 3, 3], 1.0);
        let s1 = randn::<f64>(r, &[1, 1, 2, 2], 1.0);
        let scores = vec![s0.clone(), s1.clone()];
        let with_probe = |p: &Tensor<f64>| vec![p.clone(), s1.clone()];

        let (_, g) = lsgan_g_loss(&scores);
        a.check("least-squares generator score", &s0, &g[0], |p| lsgan_g_loss(&with_probe(p)).0);
        let (_, g) = lsgan_d_real(&scores);
        a.check("least-squares real score", &s0, &g[0], |p| lsgan_d_real(&with_probe(p)).0);
        let (_, g) = lsgan_d_fake(&scores);
        a.check("least-squares fake score", &s0, &g[0], |p| lsgan_d_fake(&with_probe(p)).0);

        let h0 = hinge_scores(r, &[1, 1, 3, 3]);
        let h1 = hinge_scores(r, &[1, 1, 2, 2]);
        let hs = vec![h0.clone(), h1.clone()];
        let with_hp = |p: &Tensor<f64>| vec![p.clone(), h1.clone()];
        let (_, g) = hinge_g_loss(&hs);
        a.check("hinge generator score", &h0, &g[0], |p| hinge_g_loss(&with_hp(p)).0);
        let (_, g) = hinge_d_real(&hs);
        a.check("hinge real score", &h0, &g[0], |p| hinge_d_real(&with_hp(p)).0);
        let (_, g) = hinge_d_fake(&hs);
        a.check("hinge fake score", &h0, &g[0], |p| hinge_d_fake(&with_hp(p)).0);
    }

    // feature matching across a two-layer, one-scale pyramid
    {
        let real = vec![vec![
            randn::<f64>(r, &[1, 2, 4, 3], 1.0),
            randn::<f64>(r, &[1, 3, 2, 2], 1.0),
        ]];
        let fake = vec![vec![
            randn::<f64>(r, &[1, 2, 4, 3], 1.0),
            randn::<f64>(r, &[1, 3, 2, 2], 1.0),
        ]];
        let (_, g) = feature_matching(&real, &fake).expect("audit fm shapes");
        a.check("feature matching activation", &fake[0][0], &g[0][0], |p| {
            let probe = vec![vec![p.clone(), fake[0][1].clone()]];
            feature_matching(&real, &probe).unwrap().0
        });
    }

    // perceptual distance through the frozen feature stack
    {
        let mut fx = FeatureExtractor::<f64>::new();
        let x = randn::<f64>(r, &[1, 3, 16, 16], 0.5);
        let t = randn::<f64>(r, &[1, 3, 16, 16], 0.5);
        let (_, g) = fx.perceptual(&x, &t);
        a.check("perceptual distance input", &x, &g, |p| fx.perceptual(p, &t).0);
    }

    // composed residual block under both normalization modes
    {
        let s_div = random_labels(r, 6, 5, DIVIDED_CLASSES as u8)
            .one_hot::<f64>(DIVIDED_CLASSES)
            .expect("audit divided one-hot");
        let masks = vec![random_mask(r, 6, 5, 0.4)];
        let x = randn::<f64>(r, &[1, 4, 6, 5], 1.0);
        let gy = randn::<f64>(r, &[1, 3, 6, 5], 1.0);
        for (name, mode) in [
            ("residual block (region-wise) input", NormMode::RegionWise),
            ("residual block (channel-wise) input", NormMode::ChannelWise),
        ] {
            let mut blk = AliasResBlk::<f64>::new(r, "audit-blk", 4, 3, true);
            blk.forward(&x, &s_div, &masks, mode).expect("audit block shapes");
            let gx = blk.backward(&gy);
            a.check(name, &x, &gx, |p| {
                dot(&blk.forward(p, &s_div, &masks, mode).unwrap(), &gy)
            });
        }
    }

    // composed encoder-decoder
    {
        let mut unet = UNet::<f64>::new(r, "audit-unet", 4, 8, 3);
        let x = randn::<f64>(r, &[1, 4, 8, 8], 0.5);
        let gy = randn::<f64>(r, &[1, 3, 8, 8], 1.0);
        unet.forward(&x);
        let gx = unet.backward(&gy);
        a.check("encoder-decoder input", &x, &gx, |p| dot(&unet.forward(p), &gy));
    }

    // composed patch discriminator (input path used by generator updates)
    {
        let mut disc = PatchDiscriminator::<f64>::new(r, "audit-disc", 5, 3);
        let x = randn::<f64>(r, &[1, 5, 16, 16], 0.5);
        let scores = disc.forward(&x);
        let gys: Vec<Tensor<f64>> =
            scores.iter().map(|s| randn::<f64>(r, s.shape(), 1.0)).collect();
        let gx = disc.backward_input(&gys, None, 5);
        a.check("patch discriminator input", &x, &gx, |p| {
            disc.forward(p).iter().zip(&gys).map(|(s, g)| dot(s, g)).sum()
        });
    }

    // composed warp regressor
    {
        let mut gmm = GmmNet::<f64>::new(r, 8, 8);
        let person = randn::<f64>(r, &[1, 7, 8, 8], 0.5);
        let cloth = randn::<f64>(r, &[1, 3, 8, 8], 0.5);
        let gy = randn::<f64>(r, &[1, 2, 5, 5], 1.0);
        gmm.forward(&person, &cloth).expect("audit regressor shapes");
        let (gp, gc) = gmm.backward(&gy).expect("audit regressor grads");
        a.check("warp regressor person input", &person, &gp, |p| {
            dot(&gmm.forward(p, &cloth).unwrap(), &gy)
        });
        a.check("warp regressor garment input", &cloth, &gc, |p| {
            dot(&gmm.forward(&person, p).unwrap(), &gy)
        });
    }

}

/// Run the audit over several seeds; each row keeps its worst error.
pub fn audit_report(seeds: &[u64]) -> Vec<AuditRow> {
    let mut a = Audit { rows: Vec::new() };
    for &seed in seeds {
        audit_seed(&mut a, seed);
    }
    a.rows
}

pub fn all_pass(rows: &[AuditRow]) -> bool {
    rows.iter().all(AuditRow::pass)
}

/// Fixed-width text table, one operation per line.
pub fn report_table(rows: &[AuditRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(9);
    let mut out = format!("{:<width$}  {:>12}  result\n", "operation", "worst error");
    for r in rows {
        let verdict = if r.pass() { "pass" } else { "FAIL" };
        out.push_str(&format!("{:<width$}  {:>12.3e}  {}\n", r.name, r.worst, verdict));
    }
    out
}

pub fn report_csv(rows: &[AuditRow]) -> String {
    let mut out = String::from("operation,worst_error,pass\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.name, r.worst, r.pass()));
    }
    out
}
