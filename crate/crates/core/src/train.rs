//! Mini-batch training of [`MannWeights`] on `L_D + w·L_B`.
//!
//! Runs are deterministic given the seed: the initial weights come from
//! the seed, and epoch `e` shuffles the training indices with a generator
//! seeded from `(seed, e)`. A [`TrainSnapshot`] taken after any epoch
//! resumes to the same bits as an uninterrupted run.

use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Matrix};
use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureLayout, FeatureSample};
use crate::losses::{graph_losses, pi_residual, LossTerms};
use crate::mann::{MannConfig, MannWeights, NetworkProfile, Normalizer};
use crate::optim::{adamw_step, AdamWConfig, AdamWState};

pub const HISTORY_SCHEMA: &str = "# schema: pibc-history v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// `w` in `L_D + w·L_B`.
    pub pi_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    pub profile: NetworkProfile,
    pub test_fraction: f64,
    /// Lower bound on the input standardization scale, in the units of
    /// each input column.
    pub input_std_floor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pi_weight: 0.0,
            epochs: 30,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            seed: 0,
            profile: NetworkProfile::desk(),
            test_fraction: 0.1,
            input_std_floor: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pi_weight >= 0.0) {
            return Err(Error::Config(format!("PI weight must be ≥ 0, got {}", self.pi_weight)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.input_std_floor >= 0.0) {
            return Err(Error::Config("input std floor must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config("test fraction must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Hash of every setting except the epoch budget, so that a run can be
    /// resumed with a larger budget.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub data: f64,
    pub pi: f64,
    pub total: f64,
}

pub fn write_history<W: Write>(mut out: W, records: &[EpochRecord]) -> Result<()> {
    writeln!(out, "{HISTORY_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "split", "data_loss", "pi_loss", "total"])?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.split.as_str().to_string(),
            r.data.to_string(),
            r.pi.to_string(),
            r.total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history<R: std::io::Read>(input: R) -> Result<Vec<EpochRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Parse(format!("bad history field {i}")))
        };
        let split = match rec.get(1) {
            Some("train") => Split::Train,
            Some("test") => Split::Test,
            other => return Err(Error::Parse(format!("bad split {other:?}"))),
        };
        out.push(EpochRecord {
            epoch: num(0)? as usize,
            split,
            data: num(2)?,
            pi: num(3)?,
            total: num(4)?,
        });
    }
    Ok(out)
}

/// Standardized inputs/targets and per-sample support maps.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub layout: FeatureLayout,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub maps: Vec<Matrix>,
}

impl PreparedData {
    pub fn new(samples: &[FeatureSample], layout: FeatureLayout, norm: &Normalizer) -> Self {
        Self {
            layout,
            x: samples.iter().map(|s| norm.normalize_x(s.x.as_slice())).collect(),
            y: samples.iter().map(|s| norm.normalize_y(s.y.as_slice())).collect(),
            maps: samples.iter().map(|s| s.support_jacobian().support_map()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    fn batch(&self, idx: &[usize]) -> (Matrix, Matrix, Rc<Vec<Matrix>>) {
        let d = self.x[idx[0]].len();
        let o = self.y[idx[0]].len();
        let x = Matrix::from_fn(idx.len(), d, |r, c| self.x[idx[r]][c]);
        let y = Matrix::from_fn(idx.len(), o, |r, c| self.y[idx[r]][c]);
        let maps = idx.iter().map(|&i| self.maps[i].clone()).collect();
        (x, y, Rc::new(maps))
    }
}

/// Loss terms and parameter gradients of one batch.
pub fn batch_gradients(
    weights: &MannWeights,
    data: &PreparedData,
    idx: &[usize],
    pi_weight: f64,
) -> Result<(LossTerms, Vec<Matrix>)> {
    let (x, y, maps) = data.batch(idx);
    let mut g = Graph::new();
    let nodes = weights.forward_graph(&mut g, x)?;
    let loss = graph_losses(&mut g, nodes.output, nodes.physical, y, maps, &data.layout, pi_weight)?;
    let terms = LossTerms::combine(g.scalar(loss.data), g.scalar(loss.pi), pi_weight);
    g.backward(loss.total)?;
    let grads = nodes.params.iter().map(|&p| g.grad(p)).collect();
    Ok((terms, grads))
}

/// Batch-mean loss terms without gradients.
pub fn batch_losses(weights: &MannWeights, data: &PreparedData, idx: &[usize], pi_weight: f64) -> Result<LossTerms> {
    let (x, y, maps) = data.batch(idx);
    let mut g = Graph::new();
    let nodes = weights.forward_graph(&mut g, x)?;
    let loss = graph_losses(&mut g, nodes.output, nodes.physical, y, maps, &data.layout, pi_weight)?;
    Ok(LossTerms::combine(g.scalar(loss.data), g.scalar(loss.pi), pi_weight))
}

/// Same quantity as [`batch_losses`] computed sample by sample through
/// explicit expert blending. Used as the finite-difference oracle.
pub fn reference_losses(
    weights: &MannWeights,
    samples: &[&FeatureSample],
    layout: &FeatureLayout,
    pi_weight: f64,
) -> Result<LossTerms> {
    let norm = &weights.normalizer;
    let (mut data, mut pi) = (0.0, 0.0);
    for s in samples {
        let xs = norm.normalize_x(s.x.as_slice());
        let ys = weights.predict_standardized(&xs)?;
        let target = norm.normalize_y(s.y.as_slice());
        data += ys.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let phys = DVector::from_vec(norm.denormalize_y(ys.as_slice()));
        pi += pi_residual(&phys, layout, &s.support_jacobian().support_map())?.norm_squared();
    }
    let b = samples.len().max(1) as f64;
    Ok(LossTerms::combine(data / b, pi / b, pi_weight))
}

/// Resumable trainer state after a completed epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSnapshot {
    pub config_hash: String,
    pub epochs_done: usize,
    pub weights: MannWeights,
    pub optimizer: AdamWState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_loss: f64,
    pub best_weights: Option<MannWeights>,
}

impl TrainSnapshot {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights of the epoch with the lowest held-out total loss (training
    /// loss when nothing is held out).
    pub best: MannWeights,
    pub best_epoch: usize,
    pub last: MannWeights,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub config: TrainConfig,
    data: PreparedData,
    train_idx: Vec<usize>,
    test_idx: Vec<usize>,
    weights: MannWeights,
    optimizer: AdamWState,
    names: Vec<String>,
    epochs_done: usize,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_loss: f64,
    best_weights: Option<MannWeights>,
}

const EVAL_CHUNK: usize = 512;

impl Trainer {
    pub fn new(config: TrainConfig, dataset: &Dataset) -> Result<Self> {
        config.validate()?;
        if dataset.is_empty() {
            return Err(Error::Config("dataset has no samples".into()));
        }
        let (train_idx, test_idx) = dataset.split(config.test_fraction);
        if train_idx.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let layout = dataset.layout;
        let mut weights = MannWeights::init(MannConfig::for_layout(&layout, config.profile), config.seed)?;
        weights.normalizer = Normalizer::fit(
            train_idx.iter().map(|&i| &dataset.samples[i].x),
            train_idx.iter().map(|&i| &dataset.samples[i].y),
            layout.input_len(),
            layout.output_len(),
            config.input_std_floor,
        );
        let data = PreparedData::new(&dataset.samples, layout, &weights.normalizer);
        let optimizer = AdamWState::new(weights.parameters());
        let names = weights.parameter_names();
        Ok(Self {
            config,
            data,
            train_idx,
            test_idx,
            weights,
            optimizer,
            names,
            epochs_done: 0,
            history: Vec::new(),
            best_epoch: None,
            best_loss: f64::INFINITY,
            best_weights: None,
        })
    }

    pub fn resume(config: TrainConfig, dataset: &Dataset, snap: TrainSnapshot) -> Result<Self> {
        if snap.config_hash != config.hash() {
            return Err(Error::Config("snapshot was taken with a different training config".into()));
        }
        let mut t = Self::new(config, dataset)?;
        if snap.weights.normalizer != t.weights.normalizer {
            return Err(Error::Config("snapshot was taken on a different dataset".into()));
        }
        t.weights = snap.weights;
        t.optimizer = snap.optimizer;
        t.epochs_done = snap.epochs_done;
        t.history = snap.history;
        t.best_epoch = snap.best_epoch;
        t.best_loss = snap.best_loss;
        t.best_weights = snap.best_weights;
        Ok(t)
    }

    pub fn snapshot(&self) -> TrainSnapshot {
        TrainSnapshot {
            config_hash: self.config.hash(),
            epochs_done: self.epochs_done,
            weights: self.weights.clone(),
            optimizer: self.optimizer.clone(),
            history: self.history.clone(),
            best_epoch: self.best_epoch,
            best_loss: self.best_loss,
            best_weights: self.best_weights.clone(),
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn is_finished(&self) -> bool {
        self.epochs_done >= self.config.epochs
    }

    pub fn weights(&self) -> &MannWeights {
        &self.weights
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn split_sizes(&self) -> (usize, usize) {
        (self.train_idx.len(), self.test_idx.len())
    }

    fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order = self.train_idx.clone();
        let seed = self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        order
    }

    fn non_finite(&self, epoch: usize) -> Error {
        Error::NonFiniteLoss {
            epoch,
            last_good: self.best_weights.clone().map(Box::new),
        }
    }

    /// Full pass over `idx` in chunks, returning sample-weighted means.
    pub fn evaluate(&self, idx: &[usize]) -> Result<LossTerms> {
        let (mut data, mut pi) = (0.0, 0.0);
        for chunk in idx.chunks(EVAL_CHUNK) {
            let l = batch_losses(&self.weights, &self.data, chunk, self.config.pi_weight)?;
            data += l.data * chunk.len() as f64;
            pi += l.pi * chunk.len() as f64;
        }
        let n = idx.len().max(1) as f64;
        Ok(LossTerms::combine(data / n, pi / n, self.config.pi_weight))
    }

    /// Trains one epoch and returns its train and test records.
    pub fn run_epoch(&mut self) -> Result<[EpochRecord; 2]> {
        let epoch = self.epochs_done;
        let order = self.epoch_order(epoch);
        let (mut data, mut pi) = (0.0, 0.0);
        for batch in order.chunks(self.config.batch_size) {
            let (terms, grads) = batch_gradients(&self.weights, &self.data, batch, self.config.pi_weight)?;
            if !terms.is_finite() {
                return Err(self.non_finite(epoch));
            }
            data += terms.data * batch.len() as f64;
            pi += terms.pi * batch.len() as f64;
            let mut params = self.weights.parameters_mut();
            adamw_step(&mut params, &grads, &self.names, &mut self.optimizer, &self.config.optimizer)?;
        }
        let n = order.len() as f64;
        let train = LossTerms::combine(data / n, pi / n, self.config.pi_weight);
        let test = if self.test_idx.is_empty() {
            train
        } else {
            self.evaluate(&self.test_idx.clone())?
        };
        if !test.is_finite() || !self.weights.is_finite() {
            return Err(self.non_finite(epoch));
        }
        if test.total < self.best_loss {
            self.best_loss = test.total;
            self.best_epoch = Some(epoch);
            self.best_weights = Some(self.weights.clone());
        }
        let rec = |split, l: LossTerms| EpochRecord {
            epoch,
            split,
            data: l.data,
            pi: l.pi,
            total: l.total,
        };
        let out = [rec(Split::Train, train), rec(Split::Test, test)];
        self.history.extend(out);
        self.epochs_done += 1;
        log::info!(
            "epoch {epoch}: train {:.5e} (L_D {:.5e}, L_B {:.5e}) test {:.5e}",
            train.total,
            train.data,
            train.pi,
            test.total
        );
        Ok(out)
    }

    pub fn finish(self) -> TrainOutcome {
        let best_epoch = self.best_epoch.unwrap_or(0);
        TrainOutcome {
            best: self.best_weights.unwrap_or_else(|| self.weights.clone()),
            best_epoch,
            last: self.weights,
            history: self.history,
        }
    }

    pub fn run(mut self) -> Result<TrainOutcome> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(self.finish())
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig, dataset: &Dataset) -> Result<TrainOutcome> {
    Trainer::new(config, dataset)?.run()
}

/// One finished run of a weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub pi_weight: f64,
    pub seed: u64,
    pub checkpoint: String,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepManifest {
    pub runs: Vec<SweepRun>,
}

impl SweepManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }
}
