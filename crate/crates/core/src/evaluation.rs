//! Dice scoring, fold plans and the cross-validation harness.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{segment_batched, DEFAULT_BLOCK};
use crate::network::PatchDnn;
use crate::patching::{build_roi_mask, build_training_pool, PoolOptions, RoiMask};
use crate::pbs::{pbs_segment, select_atlases, PbsConfig};
use crate::phantom::Subject;
use crate::training::{train_with, TrainConfig, TrainHooks, TrainLogRecord};
use crate::volume::Volume3D;
use crate::seeded_rng;

/// Which labels count as the structure when scoring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ClassSet {
    /// Every label > 0.
    Foreground,
    Classes(Vec<u16>),
}

impl ClassSet {
    fn contains(&self, label: u16) -> bool {
        match self {
            ClassSet::Foreground => label > 0,
            ClassSet::Classes(c) => c.contains(&label),
        }
    }
}

/// `2|A∩B| / (|A|+|B|)`, where A and B are the voxels whose label is in
/// `classes`. Two empty sets score 1.
pub fn dice(a: &Volume3D, b: &Volume3D, classes: &ClassSet) -> Result<f64> {
    a.check_same_grid(b, "dice operands")?;
    let (la, lb) = (a.require_labels()?, b.require_labels()?);
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in la.iter().zip(lb) {
        let (ia, ib) = (classes.contains(x), classes.contains(y));
        na += usize::from(ia);
        nb += usize::from(ib);
        both += usize::from(ia && ib);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Image ids split into `folds` disjoint groups.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPlan {
    pub fn fold_of(&self, id: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.contains(&id))
    }
}

/// Seeded shuffle, then a contiguous split whose fold sizes differ by at most
/// one (earlier folds take the remainder).
pub fn make_folds(ids: &[usize], folds: usize, seed: u64) -> Result<FoldPlan> {
    if folds < 1 {
        return Err(Error::InvalidConfig("fold count must be >= 1".into()));
    }
    if folds > ids.len() {
        return Err(Error::InvalidConfig(format!(
            "{folds} folds for {} images",
            ids.len()
        )));
    }
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut seeded_rng(seed));
    let base = shuffled.len() / folds;
    let extra = shuffled.len() % folds;
    let mut out = Vec::with_capacity(folds);
    let mut rest = shuffled.as_slice();
    for f in 0..folds {
        let (head, tail) = rest.split_at(base + usize::from(f < extra));
        out.push(head.to_vec());
        rest = tail;
    }
    Ok(FoldPlan { folds: out, seed })
}

/// Linear-interpolation quantile of sorted data (the median of an even count
/// is the mean of the two central values).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(scores: &[f64]) -> Summary {
        let mut s = scores.to_vec();
        s.sort_by(f64::total_cmp);
        Summary {
            median: quantile(&s, 0.5),
            q1: quantile(&s, 0.25),
            q3: quantile(&s, 0.75),
            min: s.first().copied().unwrap_or(f64::NAN),
            max: s.last().copied().unwrap_or(f64::NAN),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: usize,
    pub fold: usize,
    /// Pooled-foreground Dice.
    pub dice: f64,
    /// Dice of each foreground class 1..C of the reference labels.
    pub per_class: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMeta {
    pub method: String,
    pub patch: Option<usize>,
    pub learning_rate: Option<f64>,
    pub steps: Option<u64>,
    pub folds: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldLog {
    pub fold: usize,
    /// Training loss per step, when the method trains.
    pub losses: Vec<f64>,
}

/// Per-image and aggregate Dice of one experiment arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub meta: ExperimentMeta,
    pub scores: Vec<ImageScore>,
    pub summary: Summary,
    /// Summary of each foreground class, in class order.
    pub per_class: Vec<Summary>,
    pub folds: Vec<FoldLog>,
}

impl DiceReport {
    pub fn from_scores(meta: ExperimentMeta, mut scores: Vec<ImageScore>, folds: Vec<FoldLog>) -> Self {
        scores.sort_by_key(|s| s.image_id);
        let pooled: Vec<f64> = scores.iter().map(|s| s.dice).collect();
        let n_classes = scores.iter().map(|s| s.per_class.len()).max().unwrap_or(0);
        let per_class = (0..n_classes)
            .map(|c| {
                let v: Vec<f64> = scores.iter().filter_map(|s| s.per_class.get(c).copied()).collect();
                Summary::of(&v)
            })
            .collect();
        DiceReport {
            meta,
            summary: Summary::of(&pooled),
            scores,
            per_class,
            folds,
        }
    }

    pub fn median(&self) -> f64 {
        self.summary.median
    }

    /// `image_id,fold,dice` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_id", "fold", "dice"])?;
        for s in &self.scores {
            w.write_record([s.image_id.to_string(), s.fold.to_string(), s.dice.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Plain-text table with one row per experiment arm.
pub fn summary_table(reports: &[DiceReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>5} {:>8} {:>8} {:>8} {:>8} {:>8} {:>3}",
        "setting", "patch", "median", "q1", "q3", "min", "max", "n"
    );
    for r in reports {
        let patch = r.meta.patch.map(|p| p.to_string()).unwrap_or_else(|| "-".into());
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>3}",
            r.meta.method, patch, s.median, s.q1, s.q3, s.min, s.max, r.scores.len()
        );
    }
    out
}

/// A segmentation method that can be trained on atlases and applied to a
/// held-out image.
pub trait FoldMethod {
    type Model;

    fn describe(&self) -> ExperimentMeta;

    fn fit(&mut self, fold: usize, atlases: &[&Subject], mask: &RoiMask) -> Result<(Self::Model, FoldLog)>;

    fn predict(&mut self, model: &Self::Model, target: &Subject, mask: &RoiMask) -> Result<Volume3D>;
}

/// The patch network, trained from scratch per fold with seed `seed + fold`.
pub struct NetworkMethod {
    pub config: TrainConfig,
    pub block: usize,
    pub on_step: Option<Box<dyn Fn(usize, &TrainLogRecord)>>,
}

impl NetworkMethod {
    pub fn new(config: TrainConfig) -> Self {
        NetworkMethod {
            config,
            block: DEFAULT_BLOCK,
            on_step: None,
        }
    }
}

impl FoldMethod for NetworkMethod {
    type Model = PatchDnn<f32>;

    fn describe(&self) -> ExperimentMeta {
        ExperimentMeta {
            method: "patchdnn".into(),
            patch: Some(self.config.patch_size),
            learning_rate: Some(self.config.learning_rate),
            steps: Some(self.config.steps),
            folds: 0,
            seed: self.config.seed,
        }
    }

    fn fit(&mut self, fold: usize, atlases: &[&Subject], mask: &RoiMask) -> Result<(Self::Model, FoldLog)> {
        let images: Vec<_> = atlases.iter().map(|s| &s.image).collect();
        let labels: Vec<_> = atlases.iter().map(|s| &s.labels).collect();
        let options = PoolOptions {
            normalization: self.config.normalization,
            classes: self.config.classes as u32,
        };
        let pool = build_training_pool(&images, &labels, mask, self.config.patch_size, &options)?;
        let config = TrainConfig {
            seed: self.config.seed.wrapping_add(fold as u64),
            ..self.config.clone()
        };
        let cb = self.on_step.as_ref().map(|f| move |r: &TrainLogRecord| f(fold, r));
        let hooks = TrainHooks {
            on_step: cb.as_ref().map(|c| c as &dyn Fn(&TrainLogRecord)),
            ..TrainHooks::default()
        };
        let out = train_with(&pool, &config, &hooks)?;
        Ok((
            out.net,
            FoldLog {
                fold,
                losses: out.log.iter().map(|r| r.loss).collect(),
            },
        ))
    }

    fn predict(&mut self, model: &Self::Model, target: &Subject, mask: &RoiMask) -> Result<Volume3D> {
        let r = segment_batched(model, &target.image, mask, self.block)?;
        Ok(r.labels)
    }
}

/// SSD atlas selection followed by patch label fusion.
pub struct PbsMethod {
    pub config: PbsConfig,
}

impl FoldMethod for PbsMethod {
    type Model = Vec<Subject>;

    fn describe(&self) -> ExperimentMeta {
        ExperimentMeta {
            method: format!("pbs-{}", self.config.patch_side),
            patch: Some(self.config.patch_side),
            ..ExperimentMeta::default()
        }
    }

    fn fit(&mut self, fold: usize, atlases: &[&Subject], _mask: &RoiMask) -> Result<(Self::Model, FoldLog)> {
        Ok((
            atlases.iter().map(|&s| s.clone()).collect(),
            FoldLog {
                fold,
                losses: Vec::new(),
            },
        ))
    }

    fn predict(&mut self, model: &Self::Model, target: &Subject, mask: &RoiMask) -> Result<Volume3D> {
        let images: Vec<_> = model.iter().map(|s| &s.image).collect();
        let k = self.config.atlases.min(model.len());
        let chosen = select_atlases(&target.image, &images, mask, k)?;
        let pairs: Vec<_> = chosen
            .iter()
            .map(|&(i, _)| (&model[i].image, &model[i].labels))
            .collect();
        let r = pbs_segment(&target.image, &pairs, mask, &self.config)?;
        Ok(r.labels)
    }
}

/// Runs `method` under the fold plan: for each fold, builds the ROI mask from
/// the other folds' labels, fits, then segments and scores every held-out
/// image.
pub fn crossval_with<M: FoldMethod>(
    corpus: &[Subject],
    plan: &FoldPlan,
    mask_radius: usize,
    method: &mut M,
) -> Result<DiceReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut scores = Vec::with_capacity(corpus.len());
    let mut logs = Vec::with_capacity(plan.folds.len());
    for (fold, held_out) in plan.folds.iter().enumerate() {
        let train: Vec<&Subject> = corpus.iter().filter(|s| !held_out.contains(&s.id)).collect();
        let test: Vec<&Subject> = corpus.iter().filter(|s| held_out.contains(&s.id)).collect();
        if train.is_empty() {
            return Err(Error::Empty("training folds"));
        }
        let labels: Vec<_> = train.iter().map(|s| &s.labels).collect();
        let mask = build_roi_mask(&labels, mask_radius)?;
        log::info!(
            "fold {fold}: {} atlases, {} held out, ROI {} voxels",
            train.len(),
            test.len(),
            mask.count()
        );
        let (model, fold_log) = method.fit(fold, &train, &mask)?;
        logs.push(fold_log);
        for subject in test {
            let pred = method.predict(&model, subject, &mask)?;
            let reference_classes = subject.labels.classes().max(2) as u16;
            let per_class = (1..reference_classes)
                .map(|c| dice(&pred, &subject.labels, &ClassSet::Classes(vec![c])))
                .collect::<Result<Vec<_>>>()?;
            let pooled = dice(&pred, &subject.labels, &ClassSet::Foreground)?;
            log::info!("fold {fold}: image {} dice {pooled:.4}", subject.id);
            scores.push(ImageScore {
                image_id: subject.id,
                fold,
                dice: pooled,
                per_class,
            });
        }
    }
    let meta = ExperimentMeta {
        folds: plan.folds.len(),
        seed: plan.seed,
        ..method.describe()
    };
    Ok(DiceReport::from_scores(meta, scores, logs))
}

/// Cross-validates the network: `folds` seeded folds over the corpus ids.
pub fn crossval(corpus: &[Subject], folds: usize, config: &TrainConfig, seed: u64) -> Result<DiceReport> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    config.validate()?;
    let ids: Vec<usize> = corpus.iter().map(|s| s.id).collect();
    let plan = make_folds(&ids, folds, seed)?;
    let mut method = NetworkMethod::new(config.clone());
    crossval_with(corpus, &plan, config.mask_radius, &mut method)
}
