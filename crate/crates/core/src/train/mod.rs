//! Training loops for the three pipeline stages, plus shared scaffolding:
//! loss traces, deterministic batch scheduling, and per-side GAN losses
//! (the discriminator's real and fake passes run back to back through the
//! same network, so their gradients are computed separately).

pub mod alias;
pub mod gmm;
pub mod seg;

use crate::dataset::LoadedSample;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::LabelMap;
use crate::masks::Mask;
use crate::person::{build_agnostic, synth_sample};
use crate::tensor::Tensor;

/// One fully prepared training record at working resolution.
pub struct TrainSample<E: Element> {
    pub id: String,
    pub image: Tensor<E>,
    pub seg: LabelMap,
    pub pose: Tensor<E>,
    pub cloth: Tensor<E>,
    pub cloth_mask: Mask,
    pub image_a: Tensor<E>,
    pub seg_a: LabelMap,
}

impl<E: Element> TrainSample<E> {
    /// Adopt a stored sample; it must have been preprocessed.
    pub fn from_loaded(s: LoadedSample<E>) -> Result<Self> {
        let ag = s.agnostic.ok_or_else(|| {
            Error::Dataset(format!("sample {} lacks agnostic artifacts; run preprocess", s.id))
        })?;
        Ok(TrainSample {
            id: s.id,
            image: s.image,
            seg: s.seg,
            pose: s.pose,
            cloth: s.cloth,
            cloth_mask: s.cloth_mask,
            image_a: ag.image_a,
            seg_a: ag.seg_a,
        })
    }

    /// Generate directly in memory (test fixture path, no disk involved).
    pub fn synthetic(seed: u64, h: usize, w: usize, padding_px: usize) -> Self {
        let s = synth_sample::<E>(seed, h, w);
        let ag = build_agnostic(&s.image, &s.seg, &s.joints, padding_px)
            .expect("synthetic joints are always inside");
        TrainSample {
            id: format!("mem{seed:05}"),
            image: s.image,
            seg: s.seg,
            pose: s.pose,
            cloth: s.cloth,
            cloth_mask: s.cloth_mask,
            image_a: ag.image_a,
            seg_a: ag.seg_a,
        }
    }
}

/// Indices for one training iteration: a deterministic cyclic sweep.
pub fn batch_indices(iter: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch).map(|k| (iter * batch + k) % n).collect()
}

// ---------------------------------------------------------------------------
// loss traces

/// Per-iteration loss values for a whole run, one named column per term.
/// Pushing a non-finite value aborts with the stage and iteration, which the
/// command layer maps to its numerical-failure exit code.
pub struct Trace {
    pub stage: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    pub fn new(stage: &'static str, columns: &[&'static str]) -> Self {
        Trace { stage, columns: columns.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, iter: usize, values: &[f64]) -> Result<()> {
        assert_eq!(values.len(), self.columns.len(), "one value per column");
        for (name, &v) in self.columns.iter().zip(values) {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    stage: self.stage.to_string(),
                    term: name.to_string(),
                    iteration: iter,
                });
            }
        }
        self.rows.push(values.to_vec());
        Ok(())
    }

    pub fn column(&self, name: &str) -> Vec<f64> {
        let i = self
            .columns
            .iter()
            .position(|c| *c == name)
            .unwrap_or_else(|| panic!("no trace column {name:?}"));
        self.rows.iter().map(|r| r[i]).collect()
    }

    /// Mean of a column over a trailing window ending at `end` (exclusive).
    pub fn smoothed(&self, name: &str, end: usize, window: usize) -> f64 {
        let col = self.column(name);
        let end = end.min(col.len());
        let start = end.saturating_sub(window);
        let slice = &col[start..end];
        slice.iter().sum::<f64>() / slice.len().max(1) as f64
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("iter");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&i.to_string());
            for v in row {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

// ---------------------------------------------------------------------------
// per-side GAN losses (sum of the two sides equals the joint forms)

/// Least-squares real-side discriminator loss: ½·mse(scores, 1), averaged
/// over patches and scales.
pub fn lsgan_d_real<E: Element>(scores: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(scores.len());
    let half = E::from_f64(0.5);
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let n = E::from_usize(s.numel());
        let mut g = Tensor::zeros(s.shape());
        for (o, &v) in g.data_mut().iter_mut().zip(s.data()) {
            let d = v - E::ONE;
            loss += half * d * d / (n * scales);
            *o = d / (n * scales);
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Least-squares fake-side discriminator loss: ½·mse(scores, 0).
pub fn lsgan_d_fake<E: Element>(scores: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(scores.len());
    let half = E::from_f64(0.5);
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let n = E::from_usize(s.numel());
        let mut g = Tensor::zeros(s.shape());
        for (o, &v) in g.data_mut().iter_mut().zip(s.data()) {
            loss += half * v * v / (n * scales);
            *o = v / (n * scales);
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Hinge real-side discriminator loss: mean(relu(1 − scores)).
pub fn hinge_d_real<E: Element>(scores: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(scores.len());
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let n = E::from_usize(s.numel());
        let mut g = Tensor::zeros(s.shape());
        for (o, &v) in g.data_mut().iter_mut().zip(s.data()) {
            let m = E::ONE - v;
            if m > E::ZERO {
                loss += m / (n * scales);
                *o = -(E::ONE) / (n * scales);
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

/// Hinge fake-side discriminator loss: mean(relu(1 + scores)).
pub fn hinge_d_fake<E: Element>(scores: &[Tensor<E>]) -> (E, Vec<Tensor<E>>) {
    let scales = E::from_usize(scores.len());
    let mut loss = E::ZERO;
    let mut grads = Vec::with_capacity(scores.len());
    for s in scores {
        let n = E::from_usize(s.numel());
        let mut g = Tensor::zeros(s.shape());
        for (o, &v) in g.data_mut().iter_mut().zip(s.data()) {
            let m = E::ONE + v;
            if m > E::ZERO {
                loss += m / (n * scales);
                *o = E::ONE / (n * scales);
            }
        }
        grads.push(g);
    }
    (loss, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{hinge_d_loss, lsgan_d_loss};
    use crate::rng::{stream, uniform};

    #[test]
    fn split_discriminator_losses_recompose_the_joint_forms() {
        let r = &mut stream(5, "split-loss");
        let real = vec![uniform::<f64>(r, &[1, 1, 3, 3], -2.0, 2.0), uniform(r, &[1, 1, 2, 2], -2.0, 2.0)];
        let fake = vec![uniform::<f64>(r, &[1, 1, 3, 3], -2.0, 2.0), uniform(r, &[1, 1, 2, 2], -2.0, 2.0)];

        let (joint, jr, jf) = lsgan_d_loss(&real, &fake);
        let (lr, gr) = lsgan_d_real(&real);
        let (lf, gf) = lsgan_d_fake(&fake);
        assert!((joint - (lr + lf)).abs() < 1e-12);
        for (a, b) in jr.iter().zip(&gr) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        for (a, b) in jf.iter().zip(&gf) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        let (joint, jr, jf) = hinge_d_loss(&real, &fake);
        let (lr, gr) = hinge_d_real(&real);
        let (lf, gf) = hinge_d_fake(&fake);
        assert!((joint - (lr + lf)).abs() < 1e-12);
        for (a, b) in jr.iter().zip(gr.iter()).chain(jf.iter().zip(gf.iter())) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trace_rejects_non_finite_terms_with_context() {
        let mut t = Trace::new("demo", &["a", "b"]);
        t.push(0, &[1.0, 2.0]).unwrap();
        let err = t.push(1, &[1.0, f64::NAN]).unwrap_err();
        let msg = format!("{err}");
        assert!(msg.contains("demo") && msg.contains('b') && msg.contains('1'), "{msg}");
        assert_eq!(t.rows.len(), 1);
    }

    #[test]
    fn trace_csv_and_smoothing_are_consistent() {
        let mut t = Trace::new("demo", &["x"]);
        for i in 0..10 {
            t.push(i, &[i as f64]).unwrap();
        }
        assert_eq!(t.smoothed("x", 10, 4), (6.0 + 7.0 + 8.0 + 9.0) / 4.0);
        assert_eq!(t.smoothed("x", 2, 4), 0.5);
        let csv = t.csv();
        assert!(csv.starts_with("iter,x\n0,0\n1,1\n"));
        assert_eq!(csv, t.csv());
    }

    #[test]
    fn batch_scheduling_sweeps_cyclically() {
        assert_eq!(batch_indices(0, 3, 7), vec![0, 1, 2]);
        assert_eq!(batch_indices(1, 3, 7), vec![3, 4, 5]);
        assert_eq!(batch_indices(2, 3, 7), vec![6, 0, 1]);
    }
}
