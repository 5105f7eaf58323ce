//! Training and evaluation driver.

use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape};
use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::losses::{combined_loss, combined_loss_value, ClassWeights, DICE_SMOOTH};
use crate::metrics::{foreground_means, score_volume, write_csv, MetricRow};
use crate::params::{Bound, ParamStore};
use crate::segnet::{save_weights, NetConfig, ParamReport, SegNet};
use crate::synth::{augment, generate, AugmentKind, Phantom, PhantomSpec};
use crate::tensor::{Rng, Tensor};

/// Lower bound of the learning rate schedule.
pub const MIN_LR: f64 = 1e-6;
/// A validation loss counts as an improvement only below `best − PLATEAU_THRESHOLD`.
pub const PLATEAU_THRESHOLD: f64 = 1e-4;

/// Seeds of one split never collide with another split's.
const SPLIT_STRIDE: u64 = 1 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub epochs: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub seed: u64,
    pub phantom: PhantomSpec,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Kinds drawn from (uniformly) when a training volume is augmented.
    pub augmentation: Vec<AugmentKind>,
    /// Probability that a training volume is augmented at all.
    pub augment_prob: f64,
    /// Surface Dice tolerance in voxels.
    pub surface_tolerance: f64,
    pub output_dir: Option<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            net: NetConfig::default(),
            epochs: 40,
            lr0: 0.1,
            momentum: 0.9,
            plateau_patience: 10,
            plateau_factor: 10.0,
            seed: 7,
            phantom: PhantomSpec::default(),
            n_train: 10,
            n_val: 2,
            n_test: 4,
            augmentation: vec![AugmentKind::Rot90],
            augment_prob: 0.5,
            surface_tolerance: 1.0,
            output_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(self.plateau_factor > 1.0) {
            return bad("plateau_factor must exceed 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if self.epochs == 0 || self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("epochs and volume counts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.augment_prob) {
            return bad("augment_prob must lie in [0, 1]");
        }
        if !(self.surface_tolerance >= 0.0) {
            return bad("surface_tolerance must be ≥ 0");
        }
        if self.net.in_channels != 1 || self.net.n_classes != self.phantom.n_classes {
            return Err(Error::Config(format!(
                "network must take 1 channel and predict the phantom's {} classes",
                self.phantom.n_classes
            )));
        }
        self.net.validate()?;
        self.phantom.validate()
    }

    /// Phantom seeds of the train, validation and test splits.
    pub fn split_seeds(&self) -> [Vec<u64>; 3] {
        let base = self.seed.wrapping_mul(3 * SPLIT_STRIDE);
        let split = |i: u64, n: usize| (0..n as u64).map(|k| base.wrapping_add(i * SPLIT_STRIDE + k)).collect();
        [split(0, self.n_train), split(1, self.n_val), split(2, self.n_test)]
    }
}

/// `v ← m·v + g; p ← p − lr·v`, tensor by tensor.
pub fn sgd_momentum_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    velocity: &mut [Tensor],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "sgd: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(velocity.iter()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(format!(
                "sgd: param {} vs grad {} vs velocity {}",
                p.shape(),
                g.shape(),
                v.shape()
            )));
        }
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        for ((pi, gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Reduce-on-plateau learning rate schedule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    stale: usize,
    patience: usize,
    factor: f64,
}

impl PlateauScheduler {
    pub fn new(lr: f64, patience: usize, factor: f64) -> Self {
        PlateauScheduler {
            lr,
            best: f64::INFINITY,
            stale: 0,
            patience,
            factor,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one validation loss; divides lr by `factor` once more than
    /// `patience` epochs in a row failed to improve, then restarts the count.
    pub fn step(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best - PLATEAU_THRESHOLD {
            self.best = val_loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr = (self.lr / self.factor).max(MIN_LR).min(self.lr);
                self.stale = 0;
            }
        }
        self.lr
    }
}

/// Learning rate after replaying `history` from `lr`.
pub fn plateau_scheduler(history: &[f64], patience: usize, factor: f64, lr: f64) -> f64 {
    let mut s = PlateauScheduler::new(lr, patience, factor);
    for &v in history {
        s.step(v);
    }
    s.lr()
}

#[derive(Clone, Debug)]
pub struct Datasets {
    pub train: Vec<Phantom>,
    pub val: Vec<Phantom>,
    pub test: Vec<Phantom>,
}

pub fn datasets(cfg: &TrainConfig) -> Result<Datasets> {
    let [train, val, test] = cfg.split_seeds();
    let make = |seeds: Vec<u64>| seeds.into_iter().map(|s| generate(&cfg.phantom, s)).collect::<Result<Vec<_>>>();
    Ok(Datasets {
        train: make(train)?,
        val: make(val)?,
        test: make(test)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassSummary {
    pub class_id: usize,
    pub mean_vol_dice: f64,
    pub mean_surf_dice: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub rows: Vec<MetricRow>,
    pub per_class: Vec<ClassSummary>,
    /// Means over foreground classes; background rows are reported but excluded.
    pub mean_foreground_vol_dice: f64,
    pub mean_foreground_surf_dice: f64,
    pub background_excluded_from_means: bool,
    pub params: ParamReport,
    pub wall_clock_seconds: f64,
    pub config: TrainConfig,
}

pub struct TrainOutcome {
    pub report: MetricReport,
    /// Weights of the epoch with the lowest validation loss.
    pub net: SegNet,
}

fn grads_for(store: &ParamStore, bound: &Bound, mut g: Gradients) -> Vec<Tensor> {
    store
        .ids()
        .map(|id| g.take(bound[id]).unwrap_or_else(|| Tensor::zeros(store.get(id).shape())))
        .collect()
}

/// Mean combined loss over `set`.
pub fn mean_loss(net: &SegNet, set: &[Phantom], weights: &ClassWeights) -> Result<f64> {
    let mut total = 0.0;
    for p in set {
        let logits = net.predict(&p.intensity)?;
        total += combined_loss_value(&logits, &p.labels, weights, DICE_SMOOTH)?;
    }
    Ok(total / set.len() as f64)
}

/// Runs the full recipe: train with per-volume SGD steps, select the epoch with
/// the best validation loss, and score the test split.
pub fn train(cfg: &TrainConfig, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let data = datasets(cfg)?;
    let weights = ClassWeights::from_corpus(data.train.iter().map(|p| &p.labels), cfg.net.n_classes)?;

    let mut net = SegNet::build(cfg.net.clone(), &mut Rng::stream(cfg.seed, 0))?;
    let mut rng = Rng::stream(cfg.seed, 2);
    let mut velocity: Vec<Tensor> = net.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
    let mut scheduler = PlateauScheduler::new(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = scheduler.lr();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        rng.shuffle(&mut order);
        let mut train_loss = 0.0;
        for &i in &order {
            let sample = if !cfg.augmentation.is_empty() && rng.uniform(0.0, 1.0) < cfg.augment_prob {
                let kind = cfg.augmentation[rng.below(cfg.augmentation.len())];
                augment(&data.train[i], &mut rng, kind, &cfg.phantom)
            } else {
                data.train[i].clone()
            };
            let mut tape = Tape::new();
            let bound = net.params().bind(&mut tape);
            let x = tape.constant(sample.intensity);
            let logits = net.forward(&mut tape, &bound, x)?;
            let loss = combined_loss(&mut tape, logits, &sample.labels, &weights, DICE_SMOOTH)?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { epoch, lr });
            }
            train_loss += value;
            let g = tape.backward(loss)?;
            let grads = grads_for(net.params(), &bound, g);
            sgd_momentum_step(net.params_mut().tensors_mut(), &grads, &mut velocity, lr, cfg.momentum)?;
        }
        let val_loss = mean_loss(&net, &data.val, &weights)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite { epoch, lr });
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_loss / data.train.len() as f64,
            val_loss,
            lr,
        };
        on_epoch(&record);
        epochs.push(record);
        if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
            best = Some((val_loss, epoch, net.params().clone()));
        }
        scheduler.step(val_loss);
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    *net.params_mut() = best_params;
    let rows = evaluate(&net, &data.test, cfg.surface_tolerance)?;
    let report = build_report(cfg, epochs, best_epoch, rows, net.param_report(), start.elapsed().as_secs_f64());
    Ok(TrainOutcome { report, net })
}

fn build_report(
    cfg: &TrainConfig,
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    rows: Vec<MetricRow>,
    params: ParamReport,
    wall_clock_seconds: f64,
) -> MetricReport {
    let per_class = (0..cfg.net.n_classes)
        .map(|c| {
            let rs: Vec<&MetricRow> = rows.iter().filter(|r| r.class_id == c).collect();
            let n = rs.len() as f64;
            ClassSummary {
                class_id: c,
                mean_vol_dice: rs.iter().map(|r| r.vol_dice).sum::<f64>() / n,
                mean_surf_dice: rs.iter().map(|r| r.surf_dice).sum::<f64>() / n,
            }
        })
        .collect();
    let (vol, surf) = foreground_means(&rows);
    MetricReport {
        seed: cfg.seed,
        epochs,
        best_epoch,
        rows,
        per_class,
        mean_foreground_vol_dice: vol,
        mean_foreground_surf_dice: surf,
        background_excluded_from_means: true,
        params,
        wall_clock_seconds,
        config: cfg.clone(),
    }
}

/// Per-class rows for already segmented volumes.
pub fn evaluate_predictions(
    predictions: &[LabelVolume],
    truths: &[LabelVolume],
    n_classes: usize,
    tolerance: f64,
) -> Result<Vec<MetricRow>> {
    if predictions.len() != truths.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} reference volumes",
            predictions.len(),
            truths.len()
        )));
    }
    let mut rows = Vec::new();
    for (i, (p, t)) in predictions.iter().zip(truths).enumerate() {
        rows.extend(score_volume(i, p, t, n_classes, tolerance, [1.0; 3])?);
    }
    Ok(rows)
}

/// Argmax segmentation of every phantom, scored against its labels.
pub fn evaluate(net: &SegNet, phantoms: &[Phantom], tolerance: f64) -> Result<Vec<MetricRow>> {
    let preds = phantoms
        .iter()
        .map(|p| LabelVolume::argmax(&net.predict(&p.intensity)?))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<LabelVolume> = phantoms.iter().map(|p| p.labels.clone()).collect();
    evaluate_predictions(&preds, &truths, net.config().n_classes, tolerance)
}

/// Scores saved weights on the test split of `cfg`.
pub fn evaluate_weights(weights: impl AsRef<Path>, cfg: &TrainConfig) -> Result<MetricReport> {
    cfg.validate()?;
    let start = Instant::now();
    let net = crate::segnet::load_weights(weights, &cfg.net)?;
    let data = datasets(cfg)?;
    let rows = evaluate(&net, &data.test, cfg.surface_tolerance)?;
    Ok(build_report(cfg, Vec::new(), 0, rows, net.param_report(), start.elapsed().as_secs_f64()))
}

pub fn write_loss_curve<W: std::io::Write>(epochs: &[EpochRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in epochs {
        w.serialize(e).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.json`, `weights.bin` and `losscurve.csv`.
pub fn write_outputs(outcome: &TrainOutcome, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_csv(&outcome.report.rows, fs::File::create(dir.join("metrics.csv"))?)?;
    write_loss_curve(&outcome.report.epochs, fs::File::create(dir.join("losscurve.csv"))?)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&outcome.report)?)?;
    save_weights(&outcome.net, dir.join("weights.bin"))
}
