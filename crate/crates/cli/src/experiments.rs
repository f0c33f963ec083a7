//! Training, evaluation and ablation runs shared by the binary and the tests.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::DType;
use imd_core::matches::MatchRecord;
use imd_core::{FineMatchSet, Image, MatchingConfig};
use imd_data::{load_dataset, PairRecord, Supervision};
use imd_eval::{aggregate_imim, auc, corner_error, estimate_homography, estimate_pose, imim_score, pose_error, relative_pose};
use imd_eval::{ImimAggregate, ImimReport};
use imd_model::model::{ImdModel, PairMatches, RunOptions};
use imd_model::supervision::{GroundTruth, MotionLayer, PointWarp};
use imd_model::train::{coarse_precision, LossValues, TrainSample, Trainer};
use imd_model::PromptMode;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub fn load_records(dir: &Path) -> Result<Vec<PairRecord>> {
    load_dataset(dir)
        .with_context(|| format!("opening dataset {}", dir.display()))?
        .collect::<imd_data::Result<Vec<_>>>()
        .with_context(|| format!("loading dataset {}", dir.display()))
}

/// Records of the named split, or every record when none carries that split.
pub fn split<'a>(records: &'a [PairRecord], name: &str) -> Vec<&'a PairRecord> {
    let picked: Vec<&PairRecord> = records.iter().filter(|r| r.split == name).collect();
    if picked.is_empty() {
        records.iter().collect()
    } else {
        picked
    }
}

pub fn ground_truth(rec: &PairRecord, matching: &MatchingConfig) -> Result<GroundTruth> {
    Ok(match &rec.supervision {
        Supervision::Homography(h) => GroundTruth::Homography(*h),
        Supervision::Posed { a, b } => {
            GroundTruth::Posed { a: a.clone(), b: b.clone(), occlusion_tolerance: matching.occlusion_tolerance }
        }
        Supervision::Masks { instances, background: Some(bg), motions: Some(ms), .. } => {
            if ms.len() != instances.len() {
                bail!("{}: {} motions for {} instances", rec.id, ms.len(), instances.len());
            }
            let layers = instances
                .iter()
                .zip(ms)
                .map(|(p, h)| MotionLayer { mask_a: p.source_mask.clone(), mask_b: p.target_mask.clone(), h: *h })
                .collect();
            GroundTruth::Layered { background: *bg, layers }
        }
        Supervision::Masks { .. } => bail!("{}: mask pairs without motions cannot supervise training", rec.id),
    })
}

pub fn to_samples(records: &[&PairRecord], matching: &MatchingConfig) -> Result<Vec<TrainSample>> {
    records
        .iter()
        .map(|r| {
            Ok(TrainSample { image_a: r.image_a.clone(), image_b: r.image_b.clone(), gt: ground_truth(r, matching)? })
        })
        .collect()
}

pub fn run_options(cfg: &RunConfig) -> RunOptions {
    RunOptions::new(cfg.matching.clone(), cfg.model.cipm.mode)
}

/// Builds the model of `cfg` and, when a checkpoint is given, loads it; a
/// checkpoint of a different architecture fails with the manifest diff.
pub fn load_model(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<ImdModel> {
    let model = ImdModel::new(cfg.model.clone(), DType::F32)?;
    if let Some(dir) = checkpoint {
        model.load_weights(dir)?;
    }
    Ok(model)
}

/// Trains a freshly initialized model of `cfg` on `samples`.
pub fn train(
    cfg: &RunConfig,
    samples: &[TrainSample],
    checkpoint_dir: Option<PathBuf>,
    on_step: impl FnMut(usize, &LossValues),
) -> Result<ImdModel> {
    let model = ImdModel::new(cfg.model.clone(), DType::F32)?;
    let mut trainer = Trainer::new(&model, run_options(cfg), cfg.train.options(checkpoint_dir))?;
    trainer.run(samples, on_step)?;
    Ok(model)
}

/// Applies `f` to every item on up to `jobs` threads, keeping input order.
pub fn ordered_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// Gray-level standard deviation of the 5x5 patch nearest to `(x, y)`, clipped to the image.
pub fn patch_std(img: &Image, x: f64, y: f64) -> f64 {
    let (w, h) = img.dims();
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let mut vals = Vec::with_capacity(25);
    for yy in (cy - 2).max(0)..=(cy + 2).min(h as isize - 1) {
        for xx in (cx - 2).max(0)..=(cx + 2).min(w as isize - 1) {
            let p = img.pixel(xx as usize, yy as usize);
            vals.push((p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0);
        }
    }
    if vals.is_empty() {
        return 0.0;
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Drops fine matches anchored on textureless source patches.
pub fn texture_gate(m: &FineMatchSet, a: &Image, min_std: f64) -> FineMatchSet {
    if min_std <= 0.0 {
        return m.clone();
    }
    m.filtered(|f| patch_std(a, f.xa, f.ya) >= min_std)
}

/// Matches one pair and applies the texture gate of `cfg`.
pub fn match_one(model: &ImdModel, cfg: &RunConfig, a: &Image, b: &Image) -> Result<PairMatches> {
    let mut m = model.match_pair(a, b, &run_options(cfg))?;
    m.fine = texture_gate(&m.fine, a, cfg.min_texture_std);
    Ok(m)
}

pub fn match_records(model: &ImdModel, cfg: &RunConfig, records: &[&PairRecord], jobs: usize) -> Result<Vec<PairMatches>> {
    ordered_map(records, jobs, |r| match_one(model, cfg, &r.image_a, &r.image_b).with_context(|| format!("matching {}", r.id)))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyPair {
    pub id: String,
    pub coarse_matches: usize,
    pub fine_matches: usize,
    /// Coarse matches within one cell of the truth, of those with a defined truth.
    pub coarse_correct: usize,
    pub coarse_checked: usize,
    pub inliers: usize,
    /// `None` when estimation failed.
    pub corner_error_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyAggregate {
    pub pairs: usize,
    pub failures: usize,
    /// Pooled over all pairs.
    pub coarse_precision: Option<f64>,
    pub thresholds_px: Vec<f64>,
    pub auc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomographyReport {
    pub per_pair: Vec<HomographyPair>,
    pub aggregate: HomographyAggregate,
}

fn pooled(pairs: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let (good, total) = pairs.fold((0, 0), |a, p| (a.0 + p.0, a.1 + p.1));
    (total > 0).then(|| good as f64 / total as f64)
}

fn precision_of(m: &PairMatches, gt: &dyn PointWarp) -> (usize, usize) {
    coarse_precision(&m.coarse, gt, m.grid_a, m.grid_b).unwrap_or((0, 0))
}

pub fn eval_homography(model: &ImdModel, cfg: &RunConfig, records: &[&PairRecord], jobs: usize) -> Result<HomographyReport> {
    let records: Vec<&PairRecord> = records.iter().copied().filter(|r| r.homography().is_some()).collect();
    if records.is_empty() {
        bail!("no homography pairs to evaluate");
    }
    let matches = match_records(model, cfg, &records, jobs)?;
    let e = &cfg.eval;
    let per_pair: Vec<HomographyPair> = records
        .iter()
        .zip(&matches)
        .map(|(r, m)| {
            let h_gt = *r.homography().expect("filtered");
            let (good, total) = precision_of(m, &GroundTruth::Homography(h_gt));
            let est = estimate_homography(&m.fine, e.homography_ransac_px, e.ransac_seed).ok();
            HomographyPair {
                id: r.id.clone(),
                coarse_matches: m.coarse.len(),
                fine_matches: m.fine.len(),
                coarse_correct: good,
                coarse_checked: total,
                inliers: est.as_ref().map_or(0, |h| h.inlier_count()),
                corner_error_px: est.map(|h| corner_error(&h.h, &h_gt, r.image_a.dims())).filter(|v| v.is_finite()),
            }
        })
        .collect();
    let errors: Vec<f64> = per_pair.iter().map(|p| p.corner_error_px.unwrap_or(f64::INFINITY)).collect();
    let aggregate = HomographyAggregate {
        pairs: per_pair.len(),
        failures: per_pair.iter().filter(|p| p.corner_error_px.is_none()).count(),
        coarse_precision: pooled(per_pair.iter().map(|p| (p.coarse_correct, p.coarse_checked))),
        thresholds_px: e.homography_thresholds_px.clone(),
        auc: auc(&errors, &e.homography_thresholds_px)?,
    };
    Ok(HomographyReport { per_pair, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosePair {
    pub id: String,
    pub fine_matches: usize,
    pub inliers: usize,
    pub rotation_deg: Option<f64>,
    pub translation_deg: Option<f64>,
    /// `max(rotation, translation)`; `None` when estimation failed.
    pub error_deg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseAggregate {
    pub pairs: usize,
    pub failures: usize,
    pub thresholds_deg: Vec<f64>,
    pub auc: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseReport {
    pub per_pair: Vec<PosePair>,
    pub aggregate: PoseAggregate,
}

pub fn eval_pose(model: &ImdModel, cfg: &RunConfig, records: &[&PairRecord], jobs: usize) -> Result<PoseReport> {
    let records: Vec<&PairRecord> =
        records.iter().copied().filter(|r| matches!(r.supervision, Supervision::Posed { .. })).collect();
    if records.is_empty() {
        bail!("no posed pairs to evaluate");
    }
    let matches = match_records(model, cfg, &records, jobs)?;
    let e = &cfg.eval;
    let per_pair: Vec<PosePair> = records
        .iter()
        .zip(&matches)
        .map(|(r, m)| {
            let Supervision::Posed { a, b } = &r.supervision else { unreachable!("filtered") };
            let est = estimate_pose(&m.fine, &a.k, &b.k, e.pose_ransac_px, e.ransac_seed).ok();
            let err = est.as_ref().map(|p| {
                let (r_gt, t_gt) = relative_pose(a, b);
                pose_error(&p.r, &p.t, &r_gt, &t_gt)
            });
            PosePair {
                id: r.id.clone(),
                fine_matches: m.fine.len(),
                inliers: est.as_ref().map_or(0, |p| p.inliers.iter().filter(|v| **v).count()),
                rotation_deg: err.map(|e| e.rotation_deg),
                translation_deg: err.map(|e| e.translation_deg),
                error_deg: err.map(|e| e.max_deg()),
            }
        })
        .collect();
    let errors: Vec<f64> = per_pair.iter().map(|p| p.error_deg.unwrap_or(f64::INFINITY)).collect();
    let aggregate = PoseAggregate {
        pairs: per_pair.len(),
        failures: per_pair.iter().filter(|p| p.error_deg.is_none()).count(),
        thresholds_deg: e.pose_thresholds_deg.clone(),
        auc: auc(&errors, &e.pose_thresholds_deg)?,
    };
    Ok(PoseReport { per_pair, aggregate })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImimPair {
    pub id: String,
    pub fine_matches: usize,
    #[serde(flatten)]
    pub report: ImimReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImimEvalReport {
    pub per_pair: Vec<ImimPair>,
    pub aggregate: ImimAggregate,
}

pub fn eval_imim(model: &ImdModel, cfg: &RunConfig, records: &[&PairRecord], jobs: usize) -> Result<ImimEvalReport> {
    let records: Vec<&PairRecord> = records.iter().copied().filter(|r| r.evaluation_masks().is_some()).collect();
    if records.is_empty() {
        bail!("no instance-mask pairs to evaluate");
    }
    let matches = match_records(model, cfg, &records, jobs)?;
    let per_pair = records
        .iter()
        .zip(&matches)
        .map(|(r, m)| {
            let masks = r.evaluation_masks().expect("filtered");
            let report = imim_score(&m.fine, masks, r.image_a.dims(), r.image_b.dims())?;
            Ok(ImimPair { id: r.id.clone(), fine_matches: m.fine.len(), report })
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<ImimReport> = per_pair.iter().map(|p| p.report.clone()).collect();
    Ok(ImimEvalReport { aggregate: aggregate_imim(&reports), per_pair })
}

/// Headline numbers of whichever protocols the test records support.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub imim: Option<f64>,
    pub imim_pooled: Option<f64>,
    pub homography_auc: Option<Vec<f64>>,
    pub coarse_precision: Option<f64>,
    pub pose_auc: Option<Vec<f64>>,
}

pub fn evaluate(model: &ImdModel, cfg: &RunConfig, records: &[&PairRecord], jobs: usize) -> Result<Metrics> {
    let mut m = Metrics::default();
    if records.iter().any(|r| r.evaluation_masks().is_some()) {
        let r = eval_imim(model, cfg, records, jobs)?;
        m.imim = r.aggregate.mean_of_ratios;
        m.imim_pooled = r.aggregate.ratio_of_sums;
    }
    if records.iter().any(|r| r.homography().is_some()) {
        let r = eval_homography(model, cfg, records, jobs)?;
        m.homography_auc = Some(r.aggregate.auc);
        m.coarse_precision = r.aggregate.coarse_precision;
    }
    if records.iter().any(|r| matches!(r.supervision, Supervision::Posed { .. })) {
        m.pose_auc = Some(eval_pose(model, cfg, records, jobs)?.aggregate.auc);
    }
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Axis {
    PromptMode,
    Timestep,
}

impl std::str::FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "prompt-mode" => Ok(Axis::PromptMode),
            "timestep" => Ok(Axis::Timestep),
            other => Err(format!("unknown ablation axis {other:?} (expected prompt-mode or timestep)")),
        }
    }
}

/// Values swept along each requested axis; an axis left out keeps the config's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub prompt_modes: Vec<PromptMode>,
    pub timesteps: Vec<usize>,
}

impl Sweep {
    pub fn new(axes: &[Axis], cfg: &RunConfig, timesteps: &[usize]) -> Self {
        Self {
            prompt_modes: if axes.contains(&Axis::PromptMode) { PromptMode::ALL.to_vec() } else { vec![cfg.model.cipm.mode] },
            timesteps: if axes.contains(&Axis::Timestep) { timesteps.to_vec() } else { vec![cfg.matching.timestep] },
        }
    }

    pub fn cells(&self) -> Vec<(PromptMode, usize)> {
        self.prompt_modes.iter().flat_map(|&m| self.timesteps.iter().map(move |&t| (m, t))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub prompt_mode: PromptMode,
    pub timestep: usize,
    pub final_loss: f64,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub steps: usize,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub rows: Vec<AblationRow>,
}

/// Trains one model per sweep cell with identical budgets and seeds, then
/// evaluates each on `test`.
pub fn ablate(
    cfg: &RunConfig,
    train_records: &[&PairRecord],
    test_records: &[&PairRecord],
    sweep: &Sweep,
    jobs: usize,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for (mode, t) in sweep.cells() {
        let mut c = cfg.clone();
        c.model.cipm.mode = mode;
        c.matching.timestep = t;
        let samples = to_samples(train_records, &c.matching)?;
        let mut last = f64::NAN;
        let model = train(&c, &samples, None, |_, v| last = v.total)?;
        let metrics = evaluate(&model, &c, test_records, jobs)?;
        log::info!("ablation {mode} t={t}: {metrics:?}");
        rows.push(AblationRow { prompt_mode: mode, timestep: t, final_loss: last, metrics });
    }
    Ok(AblationReport { steps: cfg.train.steps, train_pairs: train_records.len(), test_pairs: test_records.len(), rows })
}

fn cell(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}", v * scale))
}

pub fn ablation_markdown(report: &AblationReport) -> String {
    let mut s = format!(
        "| prompt mode | timestep | final loss | IMIM | IMIM (pooled) | coarse prec. (%) | H AUC (%) | pose AUC (%) |\n\
         |---|---|---|---|---|---|---|---|\n"
    );
    for r in &report.rows {
        let m = &r.metrics;
        let list = |v: &Option<Vec<f64>>| {
            v.as_ref().map_or_else(|| "n/a".to_string(), |a| a.iter().map(|x| format!("{:.1}", 100.0 * x)).collect::<Vec<_>>().join(" / "))
        };
        s.push_str(&format!(
            "| {} | {} | {:.4} | {} | {} | {} | {} | {} |\n",
            r.prompt_mode,
            r.timestep,
            r.final_loss,
            cell(m.imim, 1.0),
            cell(m.imim_pooled, 1.0),
            cell(m.coarse_precision, 100.0),
            list(&m.homography_auc),
            list(&m.pose_auc)
        ));
    }
    s
}

/// One [`MatchRecord`] per fine match, as JSON lines.
pub fn match_lines(m: &FineMatchSet) -> String {
    m.iter().map(|f| serde_json::to_string(&MatchRecord::fine(f)).expect("match record serializes") + "\n").collect()
}
