//! Synthetic (person, garment) pairs and clothing-agnostic preprocessing.
//!
//! Real datasets need pretrained human parsers and pose estimators; here a
//! procedural stick-figure renderer produces photos, exact segmentations,
//! pose maps, and a matching flat garment image, all deterministic per seed.
//! The on-body garment silhouette differs from the flat one by a smooth
//! randomized deformation (bend, taper, width wobble), so learning the warp
//! is a real task rather than a copy.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::{self, LabelMap};
use crate::masks::Mask;
use crate::rng::stream;
use crate::tensor::Tensor;

/// One synthetic training/evaluation record.
#[derive(Clone)]
pub struct SynthSample<E: Element> {
    /// Person photo [1, 3, H, W] in [-1, 1].
    pub image: Tensor<E>,
    /// Exact semantic segmentation of `image`.
    pub seg: LabelMap,
    /// Rendered skeleton [1, 3, H, W] in [0, 1].
    pub pose: Tensor<E>,
    /// The same garment laid flat on white [1, 3, H, W] in [-1, 1].
    pub cloth: Tensor<E>,
    /// 1 exactly where `cloth` differs from the white background.
    pub cloth_mask: Mask,
    /// Keypoints as (x, y) pixel coordinates, all strictly inside the image.
    pub joints: Vec<[f64; 2]>,
}

/// Clothing-agnostic person representation.
#[derive(Clone)]
pub struct AgnosticPair<E: Element> {
    /// Source photo with the removed region set to the neutral mid-gray
    /// (exactly 0 in [-1, 1]).
    pub image_a: Tensor<E>,
    /// Segmentation with the removed region relabeled as agnostic.
    pub seg_a: LabelMap,
    pub mask_removed: Mask,
}

/// Garment-and-arm erasure padding, 3 px at height 64 and proportional
/// elsewhere.
pub fn padding_for(h: usize) -> usize {
    ((3 * h + 32) / 64).max(1)
}

/// Binary garment region of a segmentation (the replaceable top).
pub fn cloth_region(seg: &LabelMap) -> Mask {
    Mask::from_label(seg, label::UPPER)
}

// ---------------------------------------------------------------------------
// rasterization scratchpad

struct Draw {
    h: usize,
    w: usize,
    pix: Vec<[f64; 3]>,
    tag: Vec<u8>,
}

impl Draw {
    fn new(h: usize, w: usize, bg: [f64; 3], tag0: u8) -> Self {
        Draw { h, w, pix: vec![bg; h * w], tag: vec![tag0; h * w] }
    }

    fn put(&mut self, y: i64, x: i64, c: [f64; 3], tag: u8) {
        if y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w {
            let i = y as usize * self.w + x as usize;
            self.pix[i] = c;
            self.tag[i] = tag;
        }
    }

    fn disc(&mut self, cy: f64, cx: f64, r: f64, c: [f64; 3], tag: u8) {
        let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
        let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= r * r {
                    self.put(y, x, c, tag);
                }
            }
        }
    }

    /// Thick segment from a to b (each [y, x]) with the given half-width.
    fn stroke(&mut self, a: [f64; 2], b: [f64; 2], hw: f64, c: [f64; 3], tag: u8) {
        let y0 = (a[0].min(b[0]) - hw).floor() as i64;
        let y1 = (a[0].max(b[0]) + hw).ceil() as i64;
        let x0 = (a[1].min(b[1]) - hw).floor() as i64;
        let x1 = (a[1].max(b[1]) + hw).ceil() as i64;
        let (vy, vx) = (b[0] - a[0], b[1] - a[1]);
        let len2 = (vy * vy + vx * vx).max(1e-12);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (py, px) = (y as f64 - a[0], x as f64 - a[1]);
                let t = ((py * vy + px * vx) / len2).clamp(0.0, 1.0);
                let (dy, dx) = (py - t * vy, px - t * vx);
                if dy * dy + dx * dx <= hw * hw {
                    self.put(y, x, c, tag);
                }
            }
        }
    }

    /// [1, 3, h, w] tensor mapping stored [0,1] colors to [-1, 1].
    fn signed<E: Element>(&self) -> Tensor<E> {
        let mut t = Tensor::zeros(&[1, 3, self.h, self.w]);
        for ci in 0..3 {
            let plane = t.plane_mut(0, ci);
            for (o, p) in plane.iter_mut().zip(self.pix.iter()) {
                *o = E::from_f64(p[ci] * 2.0 - 1.0);
            }
        }
        t
    }

    /// [1, 3, h, w] tensor keeping stored colors in [0, 1].
    fn unit<E: Element>(&self) -> Tensor<E> {
        let mut t = Tensor::zeros(&[1, 3, self.h, self.w]);
        for ci in 0..3 {
            let plane = t.plane_mut(0, ci);
            for (o, p) in plane.iter_mut().zip(self.pix.iter()) {
                *o = E::from_f64(p[ci]);
            }
        }
        t
    }
}

// ---------------------------------------------------------------------------
// garment styling

struct GarmentStyle {
    base: [f64; 3],
    alt: [f64; 3],
    /// 0 solid, 1 horizontal stripes, 2 vertical stripes, 3 checker.
    pattern: u8,
    pu: f64,
    pv: f64,
    /// 0 round neckline, 1 V-neck.
    neck: u8,
    neck_depth: f64,
    neck_halfwidth: f64,
    /// Covered fraction of the shoulder→hand chain, 0..0.95.
    sleeve: f64,
}

/// Garment colors stay at or below this channel value so no garment pixel
/// can collide with the white background.
const GARMENT_MAX_CHANNEL: f64 = 0.92;

fn garment_color(r: &mut ChaCha8Rng) -> [f64; 3] {
    let mut c = [0.0; 3];
    for v in &mut c {
        *v = r.gen_range(0.05..GARMENT_MAX_CHANNEL);
    }
    // push toward saturation: dampen the weakest channel
    let k = (0..3).min_by(|&a, &b| c[a].total_cmp(&c[b])).unwrap();
    c[k] *= 0.5;
    c
}

impl GarmentStyle {
    fn random(r: &mut ChaCha8Rng) -> Self {
        GarmentStyle {
            base: garment_color(r),
            alt: garment_color(r),
            pattern: r.gen_range(0..4),
            pu: r.gen_range(0.12..0.30),
            pv: r.gen_range(0.12..0.30),
            neck: r.gen_range(0..2),
            neck_depth: r.gen_range(0.08..0.20),
            neck_halfwidth: r.gen_range(0.12..0.25),
            sleeve: r.gen_range(0.0..0.95),
        }
    }

    fn in_neckline(&self, u: f64, v: f64) -> bool {
        if v >= self.neck_depth {
            return false;
        }
        let du = (u - 0.5).abs();
        match self.neck {
            0 => {
                let a = du / self.neck_halfwidth;
                let b = v / self.neck_depth;
                a * a + b * b < 1.0
            }
            _ => du < self.neck_halfwidth * (1.0 - v / self.neck_depth),
        }
    }

    fn color_at(&self, u: f64, v: f64) -> [f64; 3] {
        let odd = match self.pattern {
            0 => false,
            1 => (v / self.pv).floor() as i64 % 2 != 0,
            2 => (u / self.pu).floor() as i64 % 2 != 0,
            _ => ((u / self.pu).floor() as i64 + (v / self.pv).floor() as i64) % 2 != 0,
        };
        if odd {
            self.alt
        } else {
            self.base
        }
    }
}

// ---------------------------------------------------------------------------
// the figure

struct Figure {
    /// [head, neck, l_sho, r_sho, l_elb, r_elb, l_hand, r_hand, l_hip,
    /// r_hip, l_knee, r_knee, l_foot, r_foot], each [y, x] in pixels.
    j: [[f64; 2]; 14],
    garment_bottom: f64,
    bend: f64,
    wobble: f64,
    wobble_phase: f64,
    top_halfwidth: f64,
    bottom_halfwidth: f64,
}

const HEAD: usize = 0;
const NECK: usize = 1;
const L_SHO: usize = 2;
const R_SHO: usize = 3;
const L_ELB: usize = 4;
const R_ELB: usize = 5;
const L_HAND: usize = 6;
const R_HAND: usize = 7;
const L_HIP: usize = 8;
const R_HIP: usize = 9;
const L_KNEE: usize = 10;
const R_KNEE: usize = 11;
const L_FOOT: usize = 12;
const R_FOOT: usize = 13;

fn clamp_joint(p: [f64; 2], h: usize, w: usize) -> [f64; 2] {
    [p[0].clamp(2.0, h as f64 - 3.0), p[1].clamp(2.0, w as f64 - 3.0)]
}

fn figure(r: &mut ChaCha8Rng, h: usize, w: usize) -> Figure {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf * r.gen_range(0.44..0.56);
    let head_r = hf * r.gen_range(0.055..0.075);
    let head = [hf * r.gen_range(0.13..0.17), cx + wf * r.gen_range(-0.02..0.02)];
    let neck = [head[0] + head_r * 1.35, cx + wf * r.gen_range(-0.01..0.01)];
    let sho_y = neck[0] + hf * 0.03;
    let half_sh = wf * r.gen_range(0.17..0.23);
    let tilt = hf * r.gen_range(-0.025..0.025);
    let l_sho = [sho_y + tilt, neck[1] - half_sh];
    let r_sho = [sho_y - tilt, neck[1] + half_sh];
    let hip_y = hf * r.gen_range(0.50..0.56);
    let half_hip = wf * r.gen_range(0.11..0.15);
    let hip_cx = cx + wf * r.gen_range(-0.02..0.02);
    let l_hip = [hip_y, hip_cx - half_hip];
    let r_hip = [hip_y, hip_cx + half_hip];

    let arm = |r: &mut ChaCha8Rng, sho: [f64; 2], side: f64| {
        // angles measured from straight down; positive swings outward
        let a1 = r.gen_range(-0.25..0.95f64);
        let len1 = hf * r.gen_range(0.13..0.17);
        let elb = [sho[0] + len1 * a1.cos(), sho[1] + side * len1 * a1.sin()];
        let a2 = a1 + r.gen_range(-0.6..0.6f64);
        let len2 = hf * r.gen_range(0.12..0.16);
        let hand = [elb[0] + len2 * a2.cos(), elb[1] + side * len2 * a2.sin()];
        (elb, hand)
    };
    let (l_elb, l_hand) = arm(r, l_sho, -1.0);
    let (r_elb, r_hand) = arm(r, r_sho, 1.0);

    let leg = |r: &mut ChaCha8Rng, hip: [f64; 2], side: f64| {
        let knee = [hf * r.gen_range(0.70..0.75), hip[1] + side * wf * r.gen_range(0.0..0.03)];
        let foot = [hf * r.gen_range(0.90..0.95), knee[1] + side * wf * r.gen_range(-0.01..0.03)];
        (knee, foot)
    };
    let (l_knee, l_foot) = leg(r, l_hip, -1.0);
    let (r_knee, r_foot) = leg(r, r_hip, 1.0);

    let mut j = [
        head, neck, l_sho, r_sho, l_elb, r_elb, l_hand, r_hand, l_hip, r_hip, l_knee, r_knee,
        l_foot, r_foot,
    ];
    for p in &mut j {
        *p = clamp_joint(*p, h, w);
    }
    Figure {
        j,
        garment_bottom: hip_y + hf * r.gen_range(-0.03..0.05),
        bend: wf * r.gen_range(-0.045..0.045),
        wobble: r.gen_range(0.0..0.08),
        wobble_phase: r.gen_range(0.0..std::f64::consts::TAU),
        top_halfwidth: half_sh * r.gen_range(1.05..1.2),
        bottom_halfwidth: half_hip * r.gen_range(1.2..1.5),
    }
}

/// Point at `frac` of the way along the shoulder→elbow→hand chain.
fn along_arm(j: &[[f64; 2]; 14], sho: usize, elb: usize, hand: usize, frac: f64) -> [f64; 2] {
    let lerp = |a: [f64; 2], b: [f64; 2], t: f64| [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t];
    if frac <= 0.5 {
        lerp(j[sho], j[elb], frac * 2.0)
    } else {
        lerp(j[elb], j[hand], (frac - 0.5) * 2.0)
    }
}

/// Deterministically generate one sample. `h`, `w` must be at least 32.
pub fn synth_sample<E: Element>(seed: u64, h: usize, w: usize) -> SynthSample<E> {
    assert!(h >= 32 && w >= 32, "sample resolution too small");
    let r = &mut stream(seed, "synth-sample");
    let (hf, wf) = (h as f64, w as f64);
    let s = hf / 64.0; // stroke scale
    let fig = figure(r, h, w);
    let style = GarmentStyle::random(r);
    let skin = [r.gen_range(0.72..0.9), r.gen_range(0.58..0.72), r.gen_range(0.46..0.6)];
    let hair = [r.gen_range(0.05..0.35), r.gen_range(0.05..0.3), r.gen_range(0.02..0.25)];
    let pants = garment_color(r);

    let mut d = Draw::new(h, w, [1.0, 1.0, 1.0], label::BACKGROUND);
    let j = &fig.j;

    // legs, then the lower garment over the thigh tops
    for (knee, foot, hip) in [(L_KNEE, L_FOOT, L_HIP), (R_KNEE, R_FOOT, R_HIP)] {
        d.stroke(j[hip], j[knee], 1.6 * s, skin, label::LEGS);
        d.stroke(j[knee], j[foot], 1.4 * s, skin, label::LEGS);
    }
    let shorts_bottom = (j[L_HIP][0].max(j[R_HIP][0]) + hf * 0.10).min(hf - 3.0);
    for y in (j[L_HIP][0].min(j[R_HIP][0]) - 1.0) as i64..=shorts_bottom as i64 {
        let t = (y as f64 - j[L_HIP][0].min(j[R_HIP][0])) / (hf * 0.10).max(1.0);
        let half = (fig.bottom_halfwidth / 1.2) * (1.0 - 0.15 * t.clamp(0.0, 1.0));
        let cxm = (j[L_HIP][1] + j[R_HIP][1]) / 2.0;
        for x in (cxm - half) as i64..=(cxm + half) as i64 {
            d.put(y, x, pants, label::LOWER);
        }
    }

    // torso skin between shoulders and hips
    {
        let top = j[L_SHO][0].min(j[R_SHO][0]);
        let bot = j[L_HIP][0].max(j[R_HIP][0]);
        for y in top as i64..=bot as i64 {
            let t = ((y as f64 - top) / (bot - top).max(1.0)).clamp(0.0, 1.0);
            let half = (1.0 - t) * (j[R_SHO][1] - j[L_SHO][1]) / 2.0 + t * (j[R_HIP][1] - j[L_HIP][1]) / 2.0;
            let cxm = (1.0 - t) * (j[L_SHO][1] + j[R_SHO][1]) / 2.0 + t * (j[L_HIP][1] + j[R_HIP][1]) / 2.0;
            for x in (cxm - half) as i64..=(cxm + half) as i64 {
                d.put(y, x, skin, label::TORSO_SKIN);
            }
        }
    }

    // arms
    for (sho, elb, hand) in [(L_SHO, L_ELB, L_HAND), (R_SHO, R_ELB, R_HAND)] {
        d.stroke(j[sho], j[elb], 1.3 * s, skin, label::ARMS);
        d.stroke(j[elb], j[hand], 1.1 * s, skin, label::ARMS);
    }

    // the on-body garment: torso panel through a smooth deformed frame
    let garment_top = j[L_SHO][0].min(j[R_SHO][0]) - 1.0 * s;
    let panel_h = (fig.garment_bottom - garment_top).max(4.0);
    let sho_cx = (j[L_SHO][1] + j[R_SHO][1]) / 2.0;
    let hip_cx = (j[L_HIP][1] + j[R_HIP][1]) / 2.0;
    for y in garment_top as i64..=fig.garment_bottom as i64 {
        let t = ((y as f64 - garment_top) / panel_h).clamp(0.0, 1.0);
        let center = (1.0 - t) * sho_cx + t * hip_cx + fig.bend * (std::f64::consts::PI * t).sin();
        let half = ((1.0 - t) * fig.top_halfwidth + t * fig.bottom_halfwidth)
            * (1.0 + fig.wobble * (std::f64::consts::TAU * t + fig.wobble_phase).sin());
        for x in (center - half).ceil() as i64..=(center + half).floor() as i64 {
            let u = 0.5 + (x as f64 - center) / (2.0 * half);
            if (0.0..=1.0).contains(&u) && !style.in_neckline(u, t) {
                d.put(y, x, style.color_at(u, t), label::UPPER);
            }
        }
    }
    // sleeves follow the arms for the styled fraction of their length
    if style.sleeve > 0.02 {
        for (sho, elb, hand) in [(L_SHO, L_ELB, L_HAND), (R_SHO, R_ELB, R_HAND)] {
            let end = along_arm(j, sho, elb, hand, style.sleeve.min(0.5));
            d.stroke(j[sho], end, 1.9 * s, style.base, label::UPPER);
            if style.sleeve > 0.5 {
                let end2 = along_arm(j, sho, elb, hand, style.sleeve);
                d.stroke(j[elb], end2, 1.7 * s, style.base, label::UPPER);
            }
        }
    }

    // hands stay on top of any sleeve
    d.disc(j[L_HAND][0], j[L_HAND][1], 1.7 * s, skin, label::HANDS);
    d.disc(j[R_HAND][0], j[R_HAND][1], 1.7 * s, skin, label::HANDS);

    // head: face disc with a hair cap
    let head_r = (j[NECK][0] - j[HEAD][0]) / 1.35;
    d.disc(j[HEAD][0], j[HEAD][1], head_r, skin, label::FACE);
    let hair_top = j[HEAD][0] - head_r * 0.15;
    for y in (j[HEAD][0] - head_r * 1.25) as i64..=hair_top as i64 {
        for x in (j[HEAD][1] - head_r * 1.25) as i64..=(j[HEAD][1] + head_r * 1.25) as i64 {
            let (dy, dx) = (y as f64 - j[HEAD][0], x as f64 - j[HEAD][1]);
            if dy * dy + dx * dx <= (head_r * 1.25).powi(2) {
                d.put(y, x, hair, label::HAIR);
            }
        }
    }

    let image = d.signed::<E>();
    let seg = LabelMap::new(h, w, d.tag.clone()).expect("labels in range");

    // flat product image: same panel, undeformed, centered on white
    let mut cd = Draw::new(h, w, [1.0, 1.0, 1.0], 0);
    let top = hf * 0.18;
    let bot = hf * 0.82;
    let cxc = wf / 2.0;
    let flat_half = (fig.top_halfwidth + fig.bottom_halfwidth) / 2.0;
    let flat_half = flat_half.min(wf * 0.36);
    for y in top as i64..=bot as i64 {
        let v = ((y as f64 - top) / (bot - top)).clamp(0.0, 1.0);
        for x in (cxc - flat_half).ceil() as i64..=(cxc + flat_half).floor() as i64 {
            let u = 0.5 + (x as f64 - cxc) / (2.0 * flat_half);
            if (0.0..=1.0).contains(&u) && !style.in_neckline(u, v) {
                cd.put(y, x, style.color_at(u, v), 1);
            }
        }
    }
    if style.sleeve > 0.02 {
        let sleeve_y = top + (bot - top) * 0.06;
        let arm_reach = wf * 0.5 - flat_half - 2.0;
        let len = (arm_reach * style.sleeve).max(1.0);
        let droop = (bot - top) * 0.25 * style.sleeve;
        for side in [-1.0, 1.0] {
            let a = [sleeve_y, cxc + side * (flat_half - 1.0)];
            let b = [sleeve_y + droop, cxc + side * (flat_half + len)];
            cd.stroke(a, b, 1.9 * s, style.base, 1);
        }
    }
    let cloth = cd.signed::<E>();
    let cloth_mask = Mask::new(h, w, cd.tag.iter().map(|&t| u8::from(t != 0)).collect()).unwrap();

    // skeleton render on black, fixed per-bone palette, 2 px strokes
    const BONES: &[(usize, usize, [f64; 3])] = &[
        (HEAD, NECK, [1.0, 0.2, 0.2]),
        (NECK, L_SHO, [1.0, 0.6, 0.1]),
        (NECK, R_SHO, [0.9, 0.9, 0.1]),
        (L_SHO, L_ELB, [0.5, 1.0, 0.2]),
        (L_ELB, L_HAND, [0.2, 1.0, 0.5]),
        (R_SHO, R_ELB, [0.1, 0.9, 0.9]),
        (R_ELB, R_HAND, [0.2, 0.5, 1.0]),
        (NECK, L_HIP, [0.4, 0.2, 1.0]),
        (NECK, R_HIP, [0.8, 0.2, 1.0]),
        (L_HIP, L_KNEE, [1.0, 0.2, 0.8]),
        (L_KNEE, L_FOOT, [0.9, 0.5, 0.5]),
        (R_HIP, R_KNEE, [0.5, 0.9, 0.7]),
        (R_KNEE, R_FOOT, [0.7, 0.7, 1.0]),
    ];
    let mut pd = Draw::new(h, w, [0.0, 0.0, 0.0], 0);
    for &(a, b, c) in BONES {
        pd.stroke(j[a], j[b], 1.0 * s, c, 1);
    }
    let pose = pd.unit::<E>();

    let joints = j.iter().map(|p| [p[1], p[0]]).collect(); // (x, y) order
    SynthSample { image, seg, pose, cloth, cloth_mask, joints }
}

/// Erase the garment and arms (padded, hands and face protected) from the
/// photo and segmentation.
pub fn build_agnostic<E: Element>(
    image: &Tensor<E>,
    seg: &LabelMap,
    joints: &[[f64; 2]],
    padding_px: usize,
) -> Result<AgnosticPair<E>> {
    let (h, w) = (seg.h(), seg.w());
    if image.shape() != [1, 3, h, w] {
        return Err(Error::Shape(format!(
            "image {:?} does not match segmentation {}x{}",
            image.shape(),
            h,
            w
        )));
    }
    for (i, p) in joints.iter().enumerate() {
        if p[0] < 0.0 || p[1] < 0.0 || p[0] >= w as f64 || p[1] >= h as f64 {
            return Err(Error::InvalidArgument(format!(
                "joint {} at ({}, {}) lies outside the {}x{} image",
                i, p[0], p[1], w, h
            )));
        }
    }
    let upper = Mask::from_label(seg, label::UPPER);
    let arms = Mask::from_label(seg, label::ARMS);
    let hands = Mask::from_label(seg, label::HANDS);
    let face = Mask::from_label(seg, label::FACE);
    // hands and face must survive verbatim, so they are carved back out
    // after the padding dilation
    let removed = upper.or(&arms).dilate_square(padding_px).minus(&hands).minus(&face);

    let mut image_a = image.clone();
    for ci in 0..3 {
        let plane = image_a.plane_mut(0, ci);
        for (p, &m) in plane.iter_mut().zip(removed.data()) {
            if m != 0 {
                *p = E::ZERO; // exact midpoint of [-1, 1]
            }
        }
    }
    let mut seg_a = seg.clone();
    for (l, &m) in seg_a.data_mut().iter_mut().zip(removed.data()) {
        if m != 0 {
            *l = label::AGNOSTIC;
        }
    }
    Ok(AgnosticPair { image_a, seg_a, mask_removed: removed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_reproduces_the_sample_bit_for_bit() {
        let a = synth_sample::<f64>(977, 64, 48);
        let b = synth_sample::<f64>(977, 64, 48);
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.seg.data(), b.seg.data());
        assert_eq!(a.pose.data(), b.pose.data());
        assert_eq!(a.cloth.data(), b.cloth.data());
        assert_eq!(a.cloth_mask.data(), b.cloth_mask.data());
        assert_eq!(a.joints, b.joints);
    }

    #[test]
    fn thousand_seed_sweep_upholds_sample_invariants() {
        for seed in 0..1000u64 {
            let s = synth_sample::<f32>(seed, 64, 48);
            // mask marks exactly the non-white garment pixels
            for p in 0..64 * 48 {
                let white = (0..3).all(|c| s.cloth.data()[c * 64 * 48 + p] == 1.0);
                assert_eq!(s.cloth_mask.data()[p] != 0, !white, "seed {seed} pixel {p}");
            }
            assert!(s.pose.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "seed {seed}");
            assert!(s.image.data().iter().all(|&v| (-1.0..=1.0).contains(&v)), "seed {seed}");
            for j in &s.joints {
                assert!(j[0] >= 0.0 && j[0] < 48.0 && j[1] >= 0.0 && j[1] < 64.0, "seed {seed}");
            }
            for lbl in [label::BACKGROUND, label::FACE, label::UPPER] {
                assert!(s.seg.count(lbl) > 0, "seed {seed} lacks label {lbl}");
            }
            assert!(s.cloth_mask.count() > 0, "seed {seed} has an empty garment");
            // agnostic construction must succeed and protect the hands
            let ag = build_agnostic(&s.image, &s.seg, &s.joints, padding_for(64)).unwrap();
            let hands = Mask::from_label(&s.seg, label::HANDS);
            assert!(ag.mask_removed.and(&hands).is_empty(), "seed {seed} erased hands");
            assert_eq!(ag.seg_a.count(label::UPPER), 0, "seed {seed} kept garment labels");
        }
    }

    #[test]
    fn agnostic_preserves_everything_outside_the_removed_region() {
        let s = synth_sample::<f64>(15, 64, 48);
        let ag = build_agnostic(&s.image, &s.seg, &s.joints, 2).unwrap();
        for p in 0..64 * 48 {
            if ag.mask_removed.data()[p] == 0 {
                for c in 0..3 {
                    assert_eq!(ag.image_a.data()[c * 64 * 48 + p], s.image.data()[c * 64 * 48 + p]);
                }
                assert_eq!(ag.seg_a.data()[p], s.seg.data()[p]);
            } else {
                for c in 0..3 {
                    assert_eq!(ag.image_a.data()[c * 64 * 48 + p], 0.0, "gray must be exactly 0");
                }
                assert_eq!(ag.seg_a.data()[p], label::AGNOSTIC);
            }
        }
    }

    #[test]
    fn garment_free_input_passes_through_unchanged() {
        let mut seg = LabelMap::filled(32, 32, label::BACKGROUND);
        for y in 4..8 {
            for x in 10..20 {
                seg.set(y, x, label::FACE);
            }
        }
        let image = Tensor::<f64>::full(&[1, 3, 32, 32], 0.25);
        let ag = build_agnostic(&image, &seg, &[], 3).unwrap();
        assert_eq!(ag.image_a.data(), image.data());
        assert_eq!(ag.seg_a.data(), seg.data());
        assert_eq!(ag.mask_removed.count(), 0);
    }

    #[test]
    fn zero_padding_erases_exactly_the_garment_and_arms() {
        let mut seg = LabelMap::filled(32, 32, label::BACKGROUND);
        for y in 10..20 {
            for x in 10..20 {
                seg.set(y, x, label::UPPER);
            }
        }
        for y in 12..18 {
            seg.set(y, 8, label::ARMS);
            seg.set(y, 22, label::HANDS);
        }
        let image = Tensor::<f64>::full(&[1, 3, 32, 32], 0.4);
        let ag = build_agnostic(&image, &seg, &[], 0).unwrap();
        assert_eq!(ag.mask_removed.count(), 100 + 6);
        for y in 12..18 {
            assert!(ag.mask_removed.get(y, 8));
            assert!(!ag.mask_removed.get(y, 22), "hands must survive");
            assert_eq!(ag.seg_a.get(y, 22), label::HANDS);
        }
    }

    #[test]
    fn padded_removal_regions_nest() {
        let s = synth_sample::<f64>(99, 64, 48);
        let a0 = build_agnostic(&s.image, &s.seg, &s.joints, 0).unwrap();
        let a2 = build_agnostic(&s.image, &s.seg, &s.joints, 2).unwrap();
        assert!(a0.mask_removed.is_subset_of(&a2.mask_removed));
        assert!(a2.mask_removed.count() > a0.mask_removed.count());
    }

    #[test]
    fn joints_outside_the_image_are_rejected() {
        let s = synth_sample::<f64>(3, 64, 48);
        let mut joints = s.joints.clone();
        joints[0] = [100.0, 10.0];
        assert!(build_agnostic(&s.image, &s.seg, &joints, 2).is_err());
    }

    #[test]
    fn garment_region_collects_exactly_the_garment_labels() {
        let s = synth_sample::<f64>(7, 64, 48);
        let m = cloth_region(&s.seg);
        assert_eq!(m.count(), s.seg.count(label::UPPER));
        for p in 0..64 * 48 {
            assert_eq!(m.data()[p] != 0, s.seg.data()[p] == label::UPPER);
        }
    }
}
