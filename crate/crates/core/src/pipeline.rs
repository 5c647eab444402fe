//! End-to-end orchestration: dataset synthesis, clothing-agnostic
//! preprocessing, the three training stages, inference, paired and
//! unpaired evaluation, and the normalization ablation. Every command
//! leaves a manifest naming its inputs — configuration hash, dataset
//! hash, checkpoint digests — so any output directory can be traced to
//! exactly what produced it.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::dataset::{self, Dataset};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::imageio;
use crate::label::{LabelMap, UPPER};
use crate::masks::{divide_parse, split_alignment, Mask};
use crate::metrics::{self, tercile_edges, unit_from_signed, EvalReport, SampleMetrics};
use crate::nets::alias::{AliasGenerator, NormMode};
use crate::nets::gmm::GmmNet;
use crate::nets::unet::UNet;
use crate::ops::resize::downsample_area_to;
use crate::rng::stream;
use crate::tensor::Tensor;
use crate::tps::TpsWarper;
use crate::train::alias::{alias_inputs, synthesize, train_alias, AliasInputs};
use crate::train::gmm::{gmm_inputs, theta_to_rows, train_gmm};
use crate::train::seg::{predict_parse, seg_nets, train_seg};
use crate::train::TrainSample;

// ---------------------------------------------------------------------------
// shared helpers

/// Hex digest of a file's bytes; doubles as a checkpoint identifier.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Create `dir`, refusing to touch a non-empty one unless forced.
pub fn ensure_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let is_file = dir.is_file();
        let occupied =
            is_file || dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(true);
        if occupied && !force {
            return Err(Error::InvalidArgument(format!(
                "output directory {} is not empty; pass --force to replace it",
                dir.display()
            )));
        }
        if occupied && is_file {
            std::fs::remove_file(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        } else if occupied {
            std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn as_json<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    serde_json::to_value(v).map_err(|e| Error::Dataset(format!("serializing value: {e}")))
}

fn widen<E: Element>(t: &Tensor<E>) -> Tensor<f64> {
    let data = t.data().iter().map(|v| v.to_f64()).collect();
    Tensor::new(t.shape(), data).expect("shape unchanged")
}

fn load_train_samples<E: Element>(ds: &Dataset, ids: &[String]) -> Result<Vec<TrainSample<E>>> {
    ds.load_many::<E>(ids)?.into_iter().map(TrainSample::from_loaded).collect()
}

fn check_dims(ds: &Dataset, cfg: &TrainConfig) -> Result<()> {
    if (ds.h, ds.w) != (cfg.h, cfg.w) {
        return Err(Error::InvalidArgument(format!(
            "dataset is {}x{} but the configuration asks for {}x{}",
            ds.h, ds.w, cfg.h, cfg.w
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpoint sets

pub const CHECKPOINT_SET_FILE: &str = "checkpoints.json";
pub const SEG_CKPT: &str = "seg.ck";
pub const GMM_CKPT: &str = "gmm.ck";
pub const ALIAS_CKPT: &str = "alias.ck";

/// The three stage checkpoints written by one training run, with the
/// configuration hash they were trained under and per-file digests.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointSet {
    pub config_hash: String,
    pub seg: String,
    pub gmm: String,
    pub alias: String,
    pub seg_digest: String,
    pub gmm_digest: String,
    pub alias_digest: String,
}

impl CheckpointSet {
    /// Short combined identifier for reports.
    pub fn combined_id(&self) -> String {
        let joined = format!("{}{}{}", self.seg_digest, self.gmm_digest, self.alias_digest);
        format!("{:x}", Sha256::digest(joined.as_bytes()))[..12].to_string()
    }
}

/// The three trained stage networks, ready for inference.
pub struct Stages<E: Element> {
    pub seg: UNet<E>,
    pub gmm: GmmNet<E>,
    pub alias: AliasGenerator<E>,
}

/// Persist the stage networks plus the set descriptor into `dir`.
pub fn save_stages<E: Element>(
    dir: &Path,
    cfg: &TrainConfig,
    stages: &mut Stages<E>,
) -> Result<CheckpointSet> {
    let (seg_p, gmm_p, alias_p) = (dir.join(SEG_CKPT), dir.join(GMM_CKPT), dir.join(ALIAS_CKPT));
    crate::checkpoint::save_net(&seg_p, &mut stages.seg)?;
    crate::checkpoint::save_net(&gmm_p, &mut stages.gmm)?;
    crate::checkpoint::save_net(&alias_p, &mut stages.alias)?;
    let set = CheckpointSet {
        config_hash: cfg.hash(),
        seg: SEG_CKPT.to_string(),
        gmm: GMM_CKPT.to_string(),
        alias: ALIAS_CKPT.to_string(),
        seg_digest: file_digest(&seg_p)?,
        gmm_digest: file_digest(&gmm_p)?,
        alias_digest: file_digest(&alias_p)?,
    };
    dataset::write_json(&dir.join(CHECKPOINT_SET_FILE), &as_json(&set)?)?;
    Ok(set)
}

/// Load a checkpoint set, verifying the configuration hash and the file
/// digests unless `force` waives the cross-checks.
pub fn load_stages<E: Element>(
    dir: &Path,
    cfg: &TrainConfig,
    force: bool,
) -> Result<(Stages<E>, CheckpointSet)> {
    let set_path = dir.join(CHECKPOINT_SET_FILE);
    if !set_path.exists() {
        return Err(Error::Dataset(format!(
            "checkpoint descriptor {} is missing",
            set_path.display()
        )));
    }
    let set: CheckpointSet = serde_json::from_value(dataset::read_json(&set_path)?)
        .map_err(|e| Error::Dataset(format!("{}: {e}", set_path.display())))?;
    if !force && set.config_hash != cfg.hash() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint set was trained under configuration {} but {} was supplied; \
             pass --force to load anyway",
            set.config_hash,
            cfg.hash()
        )));
    }
    let entries = [
        (&set.seg, &set.seg_digest),
        (&set.gmm, &set.gmm_digest),
        (&set.alias, &set.alias_digest),
    ];
    for (name, digest) in entries {
        let p = dir.join(name);
        if !p.exists() {
            return Err(Error::Dataset(format!("checkpoint file {} is missing", p.display())));
        }
        if !force && file_digest(&p)? != *digest {
            return Err(Error::Dataset(format!(
                "checkpoint file {} does not match its recorded digest",
                p.display()
            )));
        }
    }
    let (h2, w2) = cfg.half_res();
    let (mut seg, _) = seg_nets::<E>(0);
    let mut gmm = crate::train::gmm::gmm_net::<E>(0, h2, w2);
    let mut alias =
        AliasGenerator::<E>::new(&mut stream(0, "load-alias"), cfg.h, cfg.w, cfg.norm_mode);
    crate::checkpoint::load_net(&dir.join(&set.seg), &mut seg)?;
    crate::checkpoint::load_net(&dir.join(&set.gmm), &mut gmm)?;
    crate::checkpoint::load_net(&dir.join(&set.alias), &mut alias)?;
    Ok((Stages { seg, gmm, alias }, set))
}

// ---------------------------------------------------------------------------
// data commands

pub fn cmd_synth_data(
    root: &Path,
    count: usize,
    seed: u64,
    h: usize,
    w: usize,
    force: bool,
) -> Result<Dataset> {
    dataset::generate(root, count, seed, h, w, force)
}

pub fn cmd_preprocess(root: &Path, cfg: &TrainConfig, force: bool) -> Result<()> {
    let ds = Dataset::open(root)?;
    check_dims(&ds, cfg)?;
    dataset::preprocess(root, cfg.padding_px, force)
}

// ---------------------------------------------------------------------------
// training command

pub struct TrainOutcome {
    pub set: CheckpointSet,
    pub seg_trace: crate::train::Trace,
    pub gmm_trace: crate::train::Trace,
    pub alias_trace: crate::train::Trace,
}

pub fn cmd_train<E: Element>(
    root: &Path,
    cfg: &TrainConfig,
    out: &Path,
    force: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    ensure_out_dir(out, force)?;
    let ds = Dataset::open(root)?;
    check_dims(&ds, cfg)?;
    let samples = load_train_samples::<E>(&ds, &ds.train)?;

    let seg_run = train_seg(cfg, &samples)?;
    let mut gmm_run = train_gmm(cfg, &samples)?;
    let alias_run = train_alias(cfg, &samples, &mut gmm_run.net)?;

    write_text(&out.join("seg_trace.csv"), &seg_run.trace.csv())?;
    write_text(&out.join("gmm_trace.csv"), &gmm_run.trace.csv())?;
    write_text(&out.join("alias_trace.csv"), &alias_run.trace.csv())?;

    let mut stages = Stages { seg: seg_run.unet, gmm: gmm_run.net, alias: alias_run.gen };
    let set = save_stages(out, cfg, &mut stages)?;
    dataset::write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "train",
            "config": cfg.canonical(),
            "config_hash": cfg.hash(),
            "dataset_hash": ds.manifest_hash()?,
            "train_samples": ds.train.len(),
            "checkpoints": as_json(&set)?,
        }),
    )?;
    Ok(TrainOutcome {
        set,
        seg_trace: seg_run.trace,
        gmm_trace: gmm_run.trace,
        alias_trace: alias_run.trace,
    })
}

// ---------------------------------------------------------------------------
// inference

/// Everything one try-on pass produces for a single person/garment pair.
pub struct InferOutputs<E: Element> {
    /// Predicted body parse at full resolution.
    pub parse: LabelMap,
    /// Predicted spline control offsets (resolution-free).
    pub theta: Tensor<E>,
    /// Garment warped onto the body at full resolution.
    pub warped: Tensor<E>,
    pub warped_mask: Mask,
    /// Predicted-garment pixels the warp failed to cover.
    pub misalign: Mask,
    /// Parse with the garment region split by warp coverage.
    pub s_div: LabelMap,
    /// Final synthesized try-on image.
    pub tryon: Tensor<E>,
}

/// One full try-on pass. The parse and the spline offsets are predicted at
/// half resolution; the offsets live in normalized coordinates, so the
/// warp itself is applied at the output resolution directly.
pub fn infer_one<E: Element>(
    stages: &mut Stages<E>,
    s: &TrainSample<E>,
    warper_full: &TpsWarper<E>,
) -> Result<InferOutputs<E>> {
    let (h, w) = (s.image.dim(2), s.image.dim(3));
    let (h2, w2) = (h / 2, w / 2);

    let parse_half = predict_parse(&mut stages.seg, s)?;
    let parse = parse_half.resize_nearest(h, w)?;

    let image_a2 = downsample_area_to(&s.image_a, h2, w2);
    let pose2 = downsample_area_to(&s.pose, h2, w2);
    let cloth2 = downsample_area_to(&s.cloth, h2, w2);
    let region2 = Mask::from_label(&parse_half, UPPER);
    let person = Tensor::concat_channels(&[&image_a2, &pose2, &region2.to_tensor::<E>()])?;
    let theta = stages.gmm.forward(&person, &cloth2)?;

    let warped = warper_full.warp(&s.cloth, &theta)?;
    let warped_mask = warper_full.warp_mask(&s.cloth_mask, &theta)?;
    let target_region = Mask::from_label(&parse, UPPER);
    let split = split_alignment(&target_region, &warped_mask);
    let s_div = divide_parse(&parse, UPPER, &split)?;

    let s_div_arr = [s_div.clone()];
    let misalign_arr = [split.misalign.clone()];
    let tryon = stages.alias.forward(&crate::nets::alias::GenInput {
        agnostic: &s.image_a,
        pose: &s.pose,
        warped: &warped,
        s_div: &s_div_arr,
        misalign: &misalign_arr,
    })?;

    Ok(InferOutputs {
        parse,
        theta,
        warped,
        warped_mask,
        misalign: split.misalign,
        s_div,
        tryon,
    })
}

/// Write one sample's inference artifacts under `out` with an id prefix.
pub fn write_outputs<E: Element>(out: &Path, id: &str, o: &InferOutputs<E>) -> Result<()> {
    imageio::save_label(&out.join(format!("{id}_parse.png")), &o.parse)?;
    imageio::save_signed(&out.join(format!("{id}_warped.png")), &o.warped)?;
    imageio::save_mask(&out.join(format!("{id}_misalign.png")), &o.misalign)?;
    imageio::save_signed(&out.join(format!("{id}_tryon.png")), &o.tryon)?;
    dataset::write_json(
        &out.join(format!("{id}_theta.json")),
        &json!({ "id": id, "offsets": theta_to_rows(&o.theta) }),
    )?;
    Ok(())
}

pub fn cmd_infer<E: Element>(
    root: &Path,
    ckpt_dir: &Path,
    cfg: &TrainConfig,
    out: &Path,
    force: bool,
) -> Result<Vec<String>> {
    cfg.validate()?;
    ensure_out_dir(out, force)?;
    let ds = Dataset::open(root)?;
    check_dims(&ds, cfg)?;
    let (mut stages, set) = load_stages::<E>(ckpt_dir, cfg, force)?;
    let samples = load_train_samples::<E>(&ds, &ds.test)?;
    let warper = TpsWarper::<E>::new(cfg.h, cfg.w);
    let mut ids = Vec::with_capacity(samples.len());
    for s in &samples {
        let o = infer_one(&mut stages, s, &warper)?;
        write_outputs(out, &s.id, &o)?;
        ids.push(s.id.clone());
    }
    dataset::write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "infer",
            "config_hash": cfg.hash(),
            "dataset_hash": ds.manifest_hash()?,
            "checkpoints": as_json(&set)?,
            "ids": ids,
        }),
    )?;
    Ok(ids)
}

// ---------------------------------------------------------------------------
// evaluation

/// Misalignment size used for binning: how much of the ground-truth
/// garment region the warp leaves uncovered. It depends only on the warp
/// stage and the ground-truth parse, so every evaluated generator is
/// binned identically.
fn reference_misalign<E: Element>(
    gmm: &mut GmmNet<E>,
    s: &TrainSample<E>,
    warper_full: &TpsWarper<E>,
) -> Result<usize> {
    let gin = gmm_inputs(s)?;
    let theta = gmm.forward(&gin.person, &gin.cloth)?;
    let warped_mask = warper_full.warp_mask(&s.cloth_mask, &theta)?;
    let target = Mask::from_label(&s.seg, UPPER);
    Ok(split_alignment(&target, &warped_mask).misalign.count())
}

/// Paired evaluation on the held-out split: the try-on result is compared
/// against the photo the garment was actually worn in.
pub fn eval_paired<E: Element>(
    ds: &Dataset,
    stages: &mut Stages<E>,
    cfg: &TrainConfig,
    set: &CheckpointSet,
    eval_seed: u64,
) -> Result<EvalReport> {
    let samples = load_train_samples::<E>(&ds, &ds.test)?;
    let warper = TpsWarper::<E>::new(cfg.h, cfg.w);

    struct Row {
        id: String,
        misalign_px: usize,
        tryon: Tensor<f64>,
        target: Tensor<f64>,
        region: Mask,
    }
    let mut rows = Vec::with_capacity(samples.len());
    for s in &samples {
        let misalign_px = reference_misalign(&mut stages.gmm, s, &warper)?;
        let o = infer_one(stages, s, &warper)?;
        rows.push(Row {
            id: s.id.clone(),
            misalign_px,
            tryon: widen(&o.tryon),
            target: widen(&s.image),
            region: Mask::from_label(&s.seg, UPPER),
        });
    }

    let counts: Vec<usize> = rows.iter().map(|r| r.misalign_px).collect();
    let edges = tercile_edges(&counts)?;
    let measured = metrics::parallel_map(&rows, metrics::eval_threads(), |r| {
        let (l1, _, empty) = crate::losses::masked_l1(&r.tryon, &r.target, &r.region);
        let a = unit_from_signed(&r.tryon);
        let b = unit_from_signed(&r.target);
        let s = metrics::ssim(&a, &b)?;
        let ms = metrics::mask_ssim(&a, &b, &r.region)?;
        Ok::<_, Error>((if empty { None } else { Some(l1) }, Some(s), ms))
    });

    let mut out = Vec::with_capacity(rows.len());
    for (r, m) in rows.iter().zip(measured) {
        let (masked_l1, ssim, mask_ssim) = m?;
        out.push(SampleMetrics {
            id: r.id.clone(),
            misalign_px: r.misalign_px,
            bin: metrics::bin_of(edges, r.misalign_px),
            masked_l1,
            ssim,
            mask_ssim,
        });
    }
    Ok(EvalReport {
        setting: "paired".to_string(),
        checkpoint_id: set.combined_id(),
        seed: eval_seed,
        config_hash: cfg.hash(),
        edges,
        samples: out,
    })
}

/// Deterministic garment reassignment for unpaired evaluation: rotate the
/// held-out ids by a seed-dependent offset so nobody keeps their own
/// garment.
pub fn unpaired_donors(n: usize, eval_seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "unpaired evaluation needs at least 2 samples, got {n}"
        )));
    }
    let k = 1 + (stream(eval_seed, "unpaired-shift").gen::<u64>() as usize) % (n - 1);
    Ok((0..n).map(|i| (i + k) % n).collect())
}

/// Unpaired evaluation: each person tries on another person's garment.
/// No ground-truth target exists, so the report carries only
/// reference-free quantities (misalignment sizes and their binning).
pub fn eval_unpaired<E: Element>(
    ds: &Dataset,
    stages: &mut Stages<E>,
    cfg: &TrainConfig,
    set: &CheckpointSet,
    eval_seed: u64,
) -> Result<EvalReport> {
    let samples = load_train_samples::<E>(&ds, &ds.test)?;
    let donors = unpaired_donors(samples.len(), eval_seed)?;
    let warper = TpsWarper::<E>::new(cfg.h, cfg.w);

    let mut rows = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let donor = &samples[donors[i]];
        let swapped = TrainSample {
            id: s.id.clone(),
            image: s.image.clone(),
            seg: s.seg.clone(),
            pose: s.pose.clone(),
            cloth: donor.cloth.clone(),
            cloth_mask: donor.cloth_mask.clone(),
            image_a: s.image_a.clone(),
            seg_a: s.seg_a.clone(),
        };
        let o = infer_one(stages, &swapped, &warper)?;
        rows.push((s.id.clone(), o.misalign.count()));
    }

    let counts: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let edges = tercile_edges(&counts)?;
    let samples_out = rows
        .into_iter()
        .map(|(id, c)| SampleMetrics {
            id,
            misalign_px: c,
            bin: metrics::bin_of(edges, c),
            masked_l1: None,
            ssim: None,
            mask_ssim: None,
        })
        .collect();
    Ok(EvalReport {
        setting: "unpaired".to_string(),
        checkpoint_id: set.combined_id(),
        seed: eval_seed,
        config_hash: cfg.hash(),
        edges,
        samples: samples_out,
    })
}

pub fn cmd_eval<E: Element>(
    root: &Path,
    ckpt_dir: &Path,
    cfg: &TrainConfig,
    out: &Path,
    paired: bool,
    eval_seed: u64,
    force: bool,
) -> Result<EvalReport> {
    cfg.validate()?;
    ensure_out_dir(out, force)?;
    let ds = Dataset::open(root)?;
    check_dims(&ds, cfg)?;
    let (mut stages, set) = load_stages::<E>(ckpt_dir, cfg, force)?;
    let report = if paired {
        eval_paired(&ds, &mut stages, cfg, &set, eval_seed)?
    } else {
        eval_unpaired(&ds, &mut stages, cfg, &set, eval_seed)?
    };
    write_text(&out.join("report.csv"), &report.csv())?;
    dataset::write_json(&out.join("summary.json"), &report.summary_json())?;
    dataset::write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "eval",
            "setting": report.setting,
            "config_hash": cfg.hash(),
            "dataset_hash": ds.manifest_hash()?,
            "checkpoints": as_json(&set)?,
            "eval_seed": eval_seed,
            "samples": report.samples.len(),
        }),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// normalization ablation

#[derive(Clone, Debug, Serialize)]
pub struct AblationCell {
    pub seed: u64,
    pub mode: String,
    /// Mean reconstruction L1 over misaligned regions of the held-out set.
    pub misaligned_l1: f64,
    /// Held-out samples that actually had misaligned pixels.
    pub counted: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    /// Seeds where region-wise beat channel-wise.
    pub wins: usize,
    pub seeds: usize,
}

impl AblationOutcome {
    pub fn sweep(&self) -> bool {
        self.wins == self.seeds
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("seed,mode,misaligned_l1,counted\n");
        for c in &self.cells {
            out.push_str(&format!("{},{},{},{}\n", c.seed, c.mode, c.misaligned_l1, c.counted));
        }
        out
    }
}

/// Mean reconstruction L1 restricted to each held-out sample's misaligned
/// region; samples whose region is empty carry no signal and are skipped.
pub fn misaligned_region_l1<E: Element>(
    gen: &mut AliasGenerator<E>,
    inputs: &[AliasInputs<E>],
) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut counted = 0;
    for inp in inputs {
        let out = synthesize(gen, inp)?;
        let (l1, _, empty) = crate::losses::masked_l1(&out, &inp.image, &inp.misalign);
        if !empty {
            total += l1.to_f64();
            counted += 1;
        }
    }
    if counted == 0 {
        return Err(Error::InvalidArgument(
            "no held-out sample has a misaligned region; the comparison is undefined".into(),
        ));
    }
    Ok((total / counted as f64, counted))
}

/// Train the synthesis stage under both normalization modes for each seed
/// (sharing the warp stage within a seed) and compare reconstruction over
/// misaligned regions on held-out samples.
pub fn ablate<E: Element>(
    cfg_base: &TrainConfig,
    train: &[TrainSample<E>],
    held_out: &[TrainSample<E>],
    seeds: &[u64],
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let warper_full = TpsWarper::<E>::new(cfg_base.h, cfg_base.w);
    let mut cells = Vec::new();
    let mut wins = 0;
    for &seed in seeds {
        let mut cfg = cfg_base.clone();
        cfg.seed = seed;
        let mut gmm = train_gmm(&cfg, train)?;
        let held_inputs: Vec<AliasInputs<E>> = held_out
            .iter()
            .map(|s| alias_inputs(s, &mut gmm.net, &warper_full))
            .collect::<Result<_>>()?;
        let mut by_mode = [0.0; 2];
        for (k, mode) in [NormMode::RegionWise, NormMode::ChannelWise].into_iter().enumerate() {
            let mut cfg_m = cfg.clone();
            cfg_m.norm_mode = mode;
            let mut run = train_alias(&cfg_m, train, &mut gmm.net)?;
            let (l1, counted) = misaligned_region_l1(&mut run.gen, &held_inputs)?;
            by_mode[k] = l1;
            cells.push(AblationCell {
                seed,
                mode: match mode {
                    NormMode::RegionWise => "region_wise".to_string(),
                    NormMode::ChannelWise => "channel_wise".to_string(),
                },
                misaligned_l1: l1,
                counted,
            });
        }
        if by_mode[0] < by_mode[1] {
            wins += 1;
        }
    }
    Ok(AblationOutcome { cells, wins, seeds: seeds.len() })
}

pub fn cmd_ablate<E: Element>(
    root: &Path,
    cfg: &TrainConfig,
    out: &Path,
    seeds: &[u64],
    force: bool,
) -> Result<AblationOutcome> {
    cfg.validate()?;
    ensure_out_dir(out, force)?;
    let ds = Dataset::open(root)?;
    check_dims(&ds, cfg)?;
    let train = load_train_samples::<E>(&ds, &ds.train)?;
    let held_out = load_train_samples::<E>(&ds, &ds.test)?;
    let outcome = ablate(cfg, &train, &held_out, seeds)?;
    write_text(&out.join("ablation.csv"), &outcome.csv())?;
    dataset::write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "ablate",
            "config_hash": cfg.hash(),
            "dataset_hash": ds.manifest_hash()?,
            "seeds": seeds,
            "wins": outcome.wins,
            "region_wise_sweeps": outcome.sweep(),
        }),
    )?;
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// derivative audit command

pub fn cmd_gradcheck(out: &Path, seeds: &[u64], force: bool) -> Result<Vec<crate::audit::AuditRow>> {
    ensure_out_dir(out, force)?;
    let rows = crate::audit::audit_report(seeds);
    write_text(&out.join("audit.csv"), &crate::audit::report_csv(&rows))?;
    write_text(&out.join("audit.txt"), &crate::audit::report_table(&rows))?;
    dataset::write_json(
        &out.join("manifest.json"),
        &json!({
            "kind": "gradcheck",
            "seeds": seeds,
            "paths": rows.len(),
            "all_pass": crate::audit::all_pass(&rows),
        }),
    )?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_root(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tryon-pipeline-tests").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.h = 32;
        cfg.w = 32;
        cfg.samples = 20;
        cfg.batch = 2;
        cfg.seed = 77;
        cfg.seg_iters = 2;
        cfg.gmm_iters = 2;
        cfg.alias_iters = 2;
        cfg
    }

    fn prepared_dataset(dir: &Path, cfg: &TrainConfig) {
        cmd_synth_data(dir, cfg.samples, cfg.seed, cfg.h, cfg.w, true).unwrap();
        cmd_preprocess(dir, cfg, false).unwrap();
    }

    #[test]
    fn train_infer_eval_round_trip() {
        let root = test_root("round-trip");
        let data = root.join("data");
        let cfg = tiny_cfg();
        prepared_dataset(&data, &cfg);

        let ck = root.join("ck");
        let outcome = cmd_train::<f32>(&data, &cfg, &ck, false).unwrap();
        assert_eq!(outcome.seg_trace.rows.len(), 2);
        assert!(ck.join(CHECKPOINT_SET_FILE).exists());

        let inf = root.join("inf");
        let ids = cmd_infer::<f32>(&data, &ck, &cfg, &inf, false).unwrap();
        assert!(!ids.is_empty());
        for id in &ids {
            for suffix in ["parse.png", "warped.png", "misalign.png", "tryon.png", "theta.json"] {
                assert!(inf.join(format!("{id}_{suffix}")).exists(), "{id}_{suffix}");
            }
        }

        let ev = root.join("ev");
        let report = cmd_eval::<f32>(&data, &ck, &cfg, &ev, true, 5, false).unwrap();
        assert_eq!(report.samples.len(), ids.len());
        assert!(report.samples.iter().all(|s| s.ssim.is_some()));
        assert!(ev.join("report.csv").exists());
    }

    #[test]
    fn repeated_runs_are_byte_identical() {
        let root = test_root("determinism");
        let data = root.join("data");
        let cfg = tiny_cfg();
        prepared_dataset(&data, &cfg);

        let ck1 = root.join("ck1");
        let ck2 = root.join("ck2");
        cmd_train::<f32>(&data, &cfg, &ck1, false).unwrap();
        cmd_train::<f32>(&data, &cfg, &ck2, false).unwrap();
        for name in [SEG_CKPT, GMM_CKPT, ALIAS_CKPT] {
            assert_eq!(
                std::fs::read(ck1.join(name)).unwrap(),
                std::fs::read(ck2.join(name)).unwrap(),
                "{name} differs between identical runs"
            );
        }

        let ev1 = root.join("ev1");
        let ev2 = root.join("ev2");
        cmd_eval::<f32>(&data, &ck1, &cfg, &ev1, true, 5, false).unwrap();
        cmd_eval::<f32>(&data, &ck2, &cfg, &ev2, true, 5, false).unwrap();
        assert_eq!(
            std::fs::read_to_string(ev1.join("report.csv")).unwrap(),
            std::fs::read_to_string(ev2.join("report.csv")).unwrap()
        );
    }

    #[test]
    fn stale_configuration_is_rejected_without_force() {
        let root = test_root("stale-config");
        let data = root.join("data");
        let cfg = tiny_cfg();
        prepared_dataset(&data, &cfg);
        let ck = root.join("ck");
        cmd_train::<f32>(&data, &cfg, &ck, false).unwrap();

        let mut other = cfg.clone();
        other.lambda_ce = 3.0;
        let err = match load_stages::<f32>(&ck, &other, false) {
            Err(e) => e,
            Ok(_) => panic!("stale configuration was accepted"),
        };
        assert!(err.to_string().contains("--force"), "{err}");
        assert!(load_stages::<f32>(&ck, &other, true).is_ok());
    }

    #[test]
    fn missing_checkpoint_error_names_the_path() {
        let root = test_root("missing-ckpt");
        let data = root.join("data");
        let cfg = tiny_cfg();
        prepared_dataset(&data, &cfg);
        let ck = root.join("ck");
        cmd_train::<f32>(&data, &cfg, &ck, false).unwrap();
        std::fs::remove_file(ck.join(GMM_CKPT)).unwrap();

        let ev = root.join("ev");
        let err = cmd_eval::<f32>(&data, &ck, &cfg, &ev, true, 5, false).unwrap_err();
        assert!(err.to_string().contains(GMM_CKPT), "{err}");
    }

    #[test]
    fn occupied_output_directory_requires_force() {
        let root = test_root("occupied-out");
        let out = root.join("out");
        std::fs::create_dir_all(&out).unwrap();
        std::fs::write(out.join("keep.txt"), "x").unwrap();
        let err = ensure_out_dir(&out, false).unwrap_err();
        assert!(err.to_string().contains("--force"), "{err}");
        ensure_out_dir(&out, true).unwrap();
        assert!(!out.join("keep.txt").exists());
    }

    #[test]
    fn unpaired_rotation_never_keeps_own_garment() {
        for seed in [1, 2, 3, 99] {
            let donors = unpaired_donors(7, seed).unwrap();
            assert!(donors.iter().enumerate().all(|(i, &d)| i != d));
            let mut sorted = donors.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..7).collect::<Vec<_>>());
        }
        assert!(unpaired_donors(1, 4).is_err());
    }

    #[test]
    fn unpaired_report_is_reference_free() {
        let root = test_root("unpaired");
        let data = root.join("data");
        let cfg = tiny_cfg();
        prepared_dataset(&data, &cfg);
        let ck = root.join("ck");
        cmd_train::<f32>(&data, &cfg, &ck, false).unwrap();
        let ev = root.join("ev");
        let report = cmd_eval::<f32>(&data, &ck, &cfg, &ev, false, 11, false).unwrap();
        assert_eq!(report.setting, "unpaired");
        assert!(report
            .samples
            .iter()
            .all(|s| s.masked_l1.is_none() && s.ssim.is_none() && s.mask_ssim.is_none()));
    }
}
