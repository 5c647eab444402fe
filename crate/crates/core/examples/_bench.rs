//! Scratch timing probe (not part of the deliverable).

use std::time::Instant;
use tryon_core::config::TrainConfig;
use tryon_core::train::{gmm::train_gmm, seg::train_seg, TrainSample};

type El = f32;

fn samples(n: usize, cfg: &TrainConfig) -> Vec<TrainSample<El>> {
    (0..n)
        .map(|i| TrainSample::synthetic(1000 + i as u64, cfg.h, cfg.w, cfg.padding_px))
        .collect()
}

fn main() {
    let mut cfg = TrainConfig::default();
    let train = samples(cfg.samples, &cfg);
    println!("dataset built: {} samples at {}x{}", train.len(), cfg.h, cfg.w);

    let probe_iters = 30;
    for batch in [4usize, 1] {
        cfg.batch = batch;
        cfg.seg_iters = probe_iters;
        cfg.gmm_iters = probe_iters;

        let t = Instant::now();
        let _ = train_seg(&cfg, &train).unwrap();
        let seg_s = t.elapsed().as_secs_f64() / probe_iters as f64;

        let t = Instant::now();
        let mut gmm = train_gmm(&cfg, &train).unwrap();
        let gmm_s = t.elapsed().as_secs_f64() / probe_iters as f64;

        cfg.alias_iters = probe_iters;
        let t = Instant::now();
        let _ = tryon_core::train::alias::train_alias(&cfg, &train, &mut gmm.net).unwrap();
        let alias_s = t.elapsed().as_secs_f64() / probe_iters as f64;

        println!(
            "batch {batch}: seg {seg_s:.3} s/it ({:.1} min/2000), gmm {gmm_s:.3} s/it ({:.1} min/2000), alias {alias_s:.3} s/it ({:.1} min/3000)",
            seg_s * 2000.0 / 60.0,
            gmm_s * 2000.0 / 60.0,
            alias_s * 3000.0 / 60.0
        );
    }
}
