//! Per-cluster training of the pre, mid and end networks.

use std::path::Path;
use std::sync::Arc;

use aqtriad_neural::{clip_global_norm, Adam, BiRnnShape, CellKind, Mode, StackedBiRnn};
use chrono::NaiveDate;
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{derive_seed, Clustering};
use crate::error::{Error, Result};
use crate::features::{encode_window, encoded_dim};
use crate::pipeline::write_atomic;
use crate::series::{AlignedDataset, ForecastFile, Pollutant};
use crate::window::{inference_window, triad_refs, DateSplit, FilterCounts, Role, WindowConfig};

pub const MODEL_VERSION: u32 = 1;
pub const CLIP_NORM: f64 = 5.0;
pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    pub patience: usize,
    pub n: usize,
    pub dropout: f64,
    pub hidden: usize,
    pub layers: usize,
    pub cell: CellKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
            patience: 5,
            n: 12,
            dropout: 0.25,
            hidden: 200,
            layers: 5,
            cell: CellKind::Lstm,
        }
    }
}

impl TrainConfig {
    /// `epochs = 0` is allowed and leaves networks at initialization.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.patience == 0 || self.hidden == 0 || self.layers == 0 {
            return bad(format!(
                "batch_size, patience, hidden and layers must be positive: {self:?}"
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return bad(format!("{name} = {b} must lie in (0, 1)"));
            }
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 0.5]", self.dropout));
        }
        self.window().map(|_| ())
    }

    pub fn window(&self) -> Result<WindowConfig> {
        WindowConfig::new(self.n)
    }

    pub fn shape(&self, input_size: usize) -> BiRnnShape {
        BiRnnShape {
            kind: self.cell,
            input_size,
            hidden_size: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
        }
    }
}

/// Training samples with inputs already encoded and flattened in the order
/// the network consumes them (reversed for the pre role).
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub station_id: Arc<str>,
    pub issue_date: NaiveDate,
    pub start_hour: usize,
    pub role: Role,
    pub inputs: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub cluster: usize,
    pub pollutant: Pollutant,
    pub window: WindowConfig,
    pub stations: Vec<String>,
    /// Indexed by [`Role::index`].
    pub roles: [Vec<EncodedSample>; 3],
    pub counts: FilterCounts,
}

impl ClusterDataset {
    pub fn input_size(&self) -> usize {
        encoded_dim(self.pollutant)
    }

    pub fn role(&self, role: Role) -> &[EncodedSample] {
        &self.roles[role.index()]
    }

    pub fn len(&self) -> usize {
        self.roles.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Pool triad samples of every station in `cluster` over the training dates.
pub fn build_cluster_dataset(
    clustering: &Clustering,
    cluster: usize,
    dataset: &AlignedDataset,
    split: &DateSplit,
    window: &WindowConfig,
) -> Result<ClusterDataset> {
    if cluster >= clustering.k {
        return Err(Error::Argument(format!(
            "cluster {cluster} out of range for k = {}",
            clustering.k
        )));
    }
    let pollutant = dataset.pollutant;
    let stations: Vec<String> = clustering
        .members(cluster)
        .into_iter()
        .filter(|s| dataset.observations.contains_key(*s))
        .map(str::to_string)
        .collect();
    let mut roles: [Vec<EncodedSample>; 3] = Default::default();
    let mut counts = FilterCounts::default();
    if stations.is_empty() {
        warn!("cluster {cluster} has no aligned stations");
    }
    for file in dataset.forecasts.iter().filter(|f| split.is_train(f.issue_date)) {
        for station in &stations {
            let Some(sf) = file.station(station) else { continue };
            let obs = &dataset.observations[station];
            let (refs, c) = triad_refs(sf, file.start_time(), obs, window);
            counts += c;
            let id: Arc<str> = Arc::from(station.as_str());
            for r in refs {
                let hours = &sf.hours[r.start..=r.start + window.n];
                roles[r.role.index()].push(EncodedSample {
                    station_id: id.clone(),
                    issue_date: file.issue_date,
                    start_hour: r.start,
                    role: r.role,
                    inputs: encode_window(pollutant, hours, r.role.reversed()),
                    target: r.target,
                });
            }
        }
    }
    Ok(ClusterDataset {
        cluster,
        pollutant,
        window: *window,
        stations,
        roles,
        counts,
    })
}

/// Feature and target standardization fitted on training samples. Uses the
/// population standard deviation; a constant column gets std 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

const MIN_STD: f64 = 1e-12;

fn guard_std(s: f64) -> f64 {
    if s > MIN_STD && s.is_finite() {
        s
    } else {
        1.0
    }
}

impl NormStats {
    /// Identity transform of the given width.
    pub fn identity(dim: usize) -> Self {
        Self {
            feature_mean: vec![0.0; dim],
            feature_std: vec![1.0; dim],
            target_mean: 0.0,
            target_std: 1.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.feature_mean.len()
    }

    /// Standardize a flat window in place.
    pub fn normalize_inputs(&self, flat: &mut [f64]) {
        let d = self.dim();
        for (i, v) in flat.iter_mut().enumerate() {
            let j = i % d;
            *v = (*v - self.feature_mean[j]) / self.feature_std[j];
        }
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_std
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Mean and population std of every encoded feature (pooled over all hours
/// of all windows) and of the targets.
pub fn fit_norm_stats<'a, I>(samples: I, dim: usize) -> Result<NormStats>
where
    I: IntoIterator<Item = &'a EncodedSample>,
    I::IntoIter: Clone,
{
    let it = samples.into_iter();
    let mut rows = 0usize;
    let mut count = 0usize;
    let mut sum = vec![0.0; dim];
    let mut tsum = 0.0;
    for s in it.clone() {
        if s.inputs.len() % dim != 0 || s.inputs.is_empty() {
            return Err(Error::Internal(format!(
                "sample inputs of length {} do not hold {dim}-wide steps",
                s.inputs.len()
            )));
        }
        for (i, v) in s.inputs.iter().enumerate() {
            sum[i % dim] += v;
        }
        rows += s.inputs.len() / dim;
        tsum += s.target;
        count += 1;
    }
    if count == 0 {
        return Err(Error::Training("no samples to fit normalization on".into()));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
    let tmean = tsum / count as f64;
    let mut sq = vec![0.0; dim];
    let mut tsq = 0.0;
    for s in it {
        for (i, v) in s.inputs.iter().enumerate() {
            let d = v - mean[i % dim];
            sq[i % dim] += d * d;
        }
        tsq += (s.target - tmean).powi(2);
    }
    Ok(NormStats {
        feature_std: sq.iter().map(|s| guard_std((s / rows as f64).sqrt())).collect(),
        feature_mean: mean,
        target_mean: tmean,
        target_std: guard_std((tsq / count as f64).sqrt()),
    })
}

/// Loss history of one network.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub samples: usize,
    pub validation_samples: usize,
    pub epochs_run: usize,
    /// Epoch (1-based) whose parameters were kept; 0 means initialization.
    pub best_epoch: usize,
    /// Eval-mode loss over the training portion before any update.
    pub initial_loss: f64,
    /// Eval-mode loss over the training portion with the kept parameters.
    pub final_loss: f64,
    /// Mean train-mode minibatch loss per epoch.
    pub train_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
}

fn eval_loss(net: &StackedBiRnn, data: &[(Vec<f64>, f64)], idx: &[usize]) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for &i in idx {
        let (x, y) = &data[i];
        total += (net.predict(x)? - y).powi(2);
    }
    Ok(total / idx.len() as f64)
}

/// Train one network on already normalized `(inputs, target)` pairs.
pub fn train_network(
    data: &[(Vec<f64>, f64)],
    shape: BiRnnShape,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(StackedBiRnn, TrainingLog)> {
    if data.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = StackedBiRnn::init(shape, &mut rng)?;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_val = if data.len() >= 2 {
        ((data.len() as f64 * VALIDATION_FRACTION).round() as usize).clamp(1, data.len() - 1)
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();

    let mut log = TrainingLog {
        samples: train_idx.len(),
        validation_samples: n_val,
        initial_loss: eval_loss(&net, data, &train_idx)?,
        ..Default::default()
    };
    let mut best_val = if n_val > 0 { eval_loss(&net, data, val_idx)? } else { f64::INFINITY };
    let mut best = net.clone();
    let mut since_best = 0;
    let mut adam = Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2);
    let mut grads = net.zeros_like();

    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            grads.fill(0.0);
            for &i in batch {
                let (x, y) = &data[i];
                let (loss, _) = net.accumulate_gradients(x, *y, Mode::Train, &mut rng, &mut grads)?;
                epoch_loss += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            clip_global_norm(&mut grads, CLIP_NORM);
            adam.step(&mut net, &grads);
        }
        if !net.is_finite() {
            return Err(Error::Training(format!("parameters diverged at epoch {epoch}")));
        }
        log.epochs_run = epoch;
        log.train_losses.push(epoch_loss / train_idx.len() as f64);
        if n_val == 0 {
            best = net.clone();
            log.best_epoch = epoch;
            continue;
        }
        let val = eval_loss(&net, data, val_idx)?;
        log.validation_losses.push(val);
        debug!("epoch {epoch}: train {:.5} val {val:.5}", log.train_losses.last().unwrap());
        if val < best_val {
            best_val = val;
            best = net.clone();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    log.final_loss = eval_loss(&best, data, &train_idx)?;
    Ok((best, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub config: TrainConfig,
    /// Indexed by role.
    pub logs: [TrainingLog; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriadModel {
    pub version: u32,
    pub cluster: usize,
    pub pollutant: Pollutant,
    pub window: WindowConfig,
    pub norm: NormStats,
    pub pre: StackedBiRnn,
    pub mid: StackedBiRnn,
    pub end: StackedBiRnn,
    pub meta: TrainingMeta,
}

impl TriadModel {
    pub fn network(&self, role: Role) -> &StackedBiRnn {
        match role {
            Role::Pre => &self.pre,
            Role::Mid => &self.mid,
            Role::End => &self.end,
        }
    }

    pub fn input_size(&self) -> usize {
        self.norm.dim()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: TriadModel = serde_json::from_str(&text)?;
        if model.version != MODEL_VERSION {
            return Err(Error::Data(format!(
                "{}: model version {} is not supported",
                path.display(),
                model.version
            )));
        }
        let d = model.input_size();
        for role in Role::ALL {
            if model.network(role).input_size != d {
                return Err(Error::Data(format!(
                    "{}: {role} network input width differs from normalization",
                    path.display()
                )));
            }
        }
        Ok(model)
    }

    /// Scalar correction from a raw (unnormalized) encoded window already in
    /// network order.
    pub fn predict_encoded(&self, role: Role, encoded: &[f64]) -> Result<f64> {
        let mut x = encoded.to_vec();
        self.norm.normalize_inputs(&mut x);
        let z = self.network(role).predict(&x)?;
        Ok(self.norm.denormalize_target(z))
    }
}

pub fn model_file_name(cluster: usize) -> String {
    format!("model_cluster_{cluster}.json")
}

fn role_seed(seed: u64, cluster: usize, role: Role) -> u64 {
    derive_seed(seed, ((cluster as u64) << 2) | role.index() as u64)
}

/// Fit normalization on all of the cluster's samples and train the three
/// role networks independently.
pub fn train_triad(data: &ClusterDataset, cfg: &TrainConfig) -> Result<TriadModel> {
    cfg.validate()?;
    if data.window.n != cfg.n {
        return Err(Error::Config(format!(
            "dataset window n = {} differs from training n = {}",
            data.window.n, cfg.n
        )));
    }
    for role in Role::ALL {
        if data.role(role).is_empty() {
            return Err(Error::Training(format!(
                "cluster {}: role {role} has no training samples",
                data.cluster
            )));
        }
    }
    let dim = data.input_size();
    let norm = fit_norm_stats(data.roles.iter().flatten(), dim)?;
    let shape = cfg.shape(dim);

    let results: Vec<Result<(StackedBiRnn, TrainingLog)>> = Role::ALL
        .par_iter()
        .map(|&role| {
            let pairs: Vec<(Vec<f64>, f64)> = data
                .role(role)
                .iter()
                .map(|s| {
                    let mut x = s.inputs.clone();
                    norm.normalize_inputs(&mut x);
                    (x, norm.normalize_target(s.target))
                })
                .collect();
            let out = train_network(&pairs, shape, cfg, role_seed(cfg.seed, data.cluster, role));
            if let Ok((_, log)) = &out {
                info!(
                    "cluster {} {role}: {} samples, {} epochs, loss {:.4} -> {:.4}",
                    data.cluster, log.samples, log.epochs_run, log.initial_loss, log.final_loss
                );
            }
            out
        })
        .collect();
    let mut nets = Vec::with_capacity(3);
    let mut logs = Vec::with_capacity(3);
    for r in results {
        let (net, log) = r?;
        nets.push(net);
        logs.push(log);
    }
    let end = nets.pop().unwrap();
    let mid = nets.pop().unwrap();
    let pre = nets.pop().unwrap();
    let logs: [TrainingLog; 3] = logs.try_into().expect("three roles");
    Ok(TriadModel {
        version: MODEL_VERSION,
        cluster: data.cluster,
        pollutant: data.pollutant,
        window: data.window,
        norm,
        pre,
        mid,
        end,
        meta: TrainingMeta {
            seed: cfg.seed,
            config: cfg.clone(),
            logs,
        },
    })
}

/// Corrected concentration for one file hour, or `None` when the station
/// is absent from the file or its window holds an invalid hour.
pub fn predict_hour(
    model: &TriadModel,
    file: &ForecastFile,
    station_id: &str,
    hour: usize,
) -> Result<Option<f64>> {
    let cfg = &model.window;
    let w = inference_window(hour, cfg)?;
    let Some(sf) = file.station(station_id) else { return Ok(None) };
    if !sf.all_valid(w.start, w.end(cfg)) {
        return Ok(None);
    }
    let encoded = encode_window(file.pollutant, &sf.hours[w.start..=w.end(cfg)], w.reversed);
    model.predict_encoded(w.role, &encoded).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(inputs: Vec<f64>, target: f64) -> EncodedSample {
        EncodedSample {
            station_id: Arc::from("S"),
            issue_date: NaiveDate::from_ymd_opt(2019, 7, 1).unwrap(),
            start_hour: 0,
            role: Role::Mid,
            inputs,
            target,
        }
    }

    #[test]
    fn norm_constant_sample() {
        let s = sample(vec![3.0, -1.0, 3.0, -1.0], 7.0);
        let ns = fit_norm_stats([&s, &s, &s], 2).unwrap();
        assert_eq!(ns.feature_mean, vec![3.0, -1.0]);
        assert_eq!(ns.feature_std, vec![1.0, 1.0]);
        assert_eq!(ns.target_mean, 7.0);
        assert_eq!(ns.target_std, 1.0);
    }

    #[test]
    fn norm_two_values() {
        let a = sample(vec![0.0], 0.0);
        let b = sample(vec![2.0], 4.0);
        let ns = fit_norm_stats([&a, &b], 1).unwrap();
        assert_eq!(ns.feature_mean, vec![1.0]);
        assert_eq!(ns.feature_std, vec![1.0]);
        assert_eq!(ns.target_std, 2.0);
    }

    #[test]
    fn norm_empty_is_error() {
        let empty: Vec<EncodedSample> = Vec::new();
        assert!(fit_norm_stats(&empty, 3).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { dropout: 0.6, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { n: 30, ..Default::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_epochs_keeps_init() {
        let data: Vec<(Vec<f64>, f64)> = (0..10).map(|i| (vec![i as f64; 6], 0.5)).collect();
        let cfg = TrainConfig { epochs: 0, hidden: 3, layers: 1, ..Default::default() };
        let shape = cfg.shape(2);
        let (net, log) = train_network(&data, shape, &cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert_eq!(net, StackedBiRnn::init(shape, &mut rng).unwrap());
        assert_eq!(log.epochs_run, 0);
        assert_eq!(log.best_epoch, 0);
    }

    #[test]
    fn constant_target_is_learned() {
        let data: Vec<(Vec<f64>, f64)> =
            (0..40).map(|i| (vec![(i % 7) as f64 / 7.0; 8], 1.5)).collect();
        let cfg = TrainConfig {
            epochs: 20,
            hidden: 4,
            layers: 1,
            dropout: 0.0,
            learning_rate: 1e-2,
            batch_size: 8,
            ..Default::default()
        };
        let (_, log) = train_network(&data, cfg.shape(2), &cfg, 1).unwrap();
        assert!(log.final_loss < log.initial_loss);
        assert!(log.final_loss < 0.1, "{log:?}");
    }
}
