//! Reproducible runs: configuration files, manifests and the five commands.
//!
//! Output layout under the run directory:
//!
//! ```text
//! clustering.json            cluster_manifest.json
//! models/model_cluster_<i>.json   models/manifest.json
//! eval/report.csv  eval/tables.txt  eval/predictions.csv  eval/manifest.json  eval/plots/
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{NaiveDate, Utc};
use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cluster::{build_feature_matrix, kmeans, Clustering, KMeansConfig};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, read_predictions, render_svg, render_tables, report_from_predictions,
    write_predictions, write_report_csv, EvalReport, PredictionRow,
};
use crate::series::{align, load_forecast_dir, load_observations, AlignedDataset, Pollutant};
use crate::station::{filter_by_selection, load_station_metadata, FeatureSelection};
use crate::synth::{expected_errors, generate_world, SynthConfig, SynthExpectations};
use crate::trainer::{build_cluster_dataset, model_file_name, train_triad, TrainConfig, TriadModel};
use crate::window::{holdout_split, DateSplit};

pub const CLUSTERING_FILE: &str = "clustering.json";
pub const CLUSTER_MANIFEST: &str = "cluster_manifest.json";
pub const MODELS_DIR: &str = "models";
pub const EVAL_DIR: &str = "eval";
pub const MANIFEST: &str = "manifest.json";

/// Write `bytes` to a sibling temp file and rename it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Argument(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Lowercase hex SHA-256 of the canonical JSON form of `value`.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub pollutant: Pollutant,
    /// Station metadata CSV.
    pub stations: PathBuf,
    /// Observation CSV.
    pub observations: PathBuf,
    /// Directory holding `forecast_YYYY-MM-DD.csv` files.
    pub forecast_dir: PathBuf,
    #[serde(default = "default_features")]
    pub features: FeatureSelection,
    pub k: usize,
    #[serde(default = "default_restarts")]
    pub kmeans_restarts: usize,
    #[serde(default)]
    pub holdout: Vec<NaiveDate>,
    #[serde(default)]
    pub seed: u64,
    pub out: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

fn default_features() -> FeatureSelection {
    FeatureSelection::LAT_LON
}

fn default_restarts() -> usize {
    10
}

impl RunConfig {
    /// Parse a TOML config. Relative paths are resolved against the
    /// directory containing the file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = read_text(path)?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.stations,
            &mut cfg.observations,
            &mut cfg.forecast_dir,
            &mut cfg.out,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.sync_seed();
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(e.to_string()))
    }

    /// The run seed drives clustering and training.
    pub fn sync_seed(&mut self) {
        self.train.seed = self.seed;
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sync_seed();
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Argument("k must be positive".into()));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be positive".into()));
        }
        self.train.validate()
    }

    fn require(path: &Path, what: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::Config(format!("{what} {} does not exist", path.display())));
        }
        Ok(())
    }

    pub fn check_data_paths(&self) -> Result<()> {
        Self::require(&self.stations, "station metadata")?;
        Self::require(&self.observations, "observation file")?;
        Self::require(&self.forecast_dir, "forecast directory")
    }

    pub fn clustering_path(&self) -> PathBuf {
        self.out.join(CLUSTERING_FILE)
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join(MODELS_DIR)
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.out.join(EVAL_DIR)
    }

    pub fn hash(&self) -> Result<String> {
        config_hash(self)
    }
}

/// Run metadata written next to every command's outputs. `created_utc` is the
/// only field that changes between identical reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub details: serde_json::Value,
    pub created_utc: String,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, seed: u64, config: &T) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            seed,
            config_hash: config_hash(config)?,
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
            details: serde_json::Value::Null,
            created_utc: Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(self)?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Ok(serde_json::from_str(&read_text(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub expectations: SynthExpectations,
}

/// Generate a synthetic world into `out` with a manifest.
pub fn run_synth(cfg: &SynthConfig, out: &Path) -> Result<SynthSummary> {
    let world = generate_world(cfg)?;
    world.write(out)?;
    let mut files = vec!["stations.csv".to_string(), "observations.csv".to_string()];
    files.extend(
        world
            .forecasts
            .iter()
            .map(|f| crate::series::forecast_file_name(f.issue_date)),
    );
    let expectations = expected_errors(cfg);
    let mut manifest = Manifest::new("synth", cfg.seed, cfg)?;
    manifest.outputs = files.clone();
    manifest.details = serde_json::to_value(expectations)?;
    manifest.save(out.join(MANIFEST))?;
    info!(
        "synthetic world: {} stations, {} files, expected forecast RMSE {:.4}",
        cfg.stations, cfg.days, expectations.forecast_rmse
    );
    Ok(SynthSummary {
        dir: out.to_path_buf(),
        files,
        expectations,
    })
}

pub fn load_synth_config(path: impl AsRef<Path>) -> Result<SynthConfig> {
    let path = path.as_ref();
    let cfg: SynthConfig = toml::from_str(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(cfg)
}

/// Cluster the stations that carry every selected feature.
pub fn run_cluster(cfg: &RunConfig) -> Result<Clustering> {
    cfg.validate()?;
    RunConfig::require(&cfg.stations, "station metadata")?;
    let registry = load_station_metadata(&cfg.stations)?;
    let usable = filter_by_selection(&registry, cfg.features);
    if cfg.k > usable.len() {
        return Err(Error::Argument(format!(
            "k = {} exceeds the {} stations with features {}",
            cfg.k,
            usable.len(),
            cfg.features
        )));
    }
    let matrix = build_feature_matrix(&usable, cfg.features)?;
    let clustering = kmeans(
        &matrix,
        &KMeansConfig {
            restarts: cfg.kmeans_restarts,
            ..KMeansConfig::new(cfg.k, cfg.seed)
        },
    )?;
    clustering.save(cfg.clustering_path())?;
    let mut manifest = Manifest::new("cluster", cfg.seed, cfg)?;
    manifest.outputs = vec![CLUSTERING_FILE.into()];
    manifest.details = serde_json::json!({
        "sizes": clustering.sizes(),
        "objective": clustering.objective,
        "stations": usable.len(),
    });
    manifest.save(cfg.out.join(CLUSTER_MANIFEST))?;
    Ok(clustering)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<AlignedDataset> {
    cfg.check_data_paths()?;
    let registry = load_station_metadata(&cfg.stations)?;
    let observations = load_observations(&cfg.observations, cfg.pollutant)?;
    let forecasts = load_forecast_dir(&cfg.forecast_dir, cfg.pollutant)?;
    let dataset = align(&registry, observations, forecasts)?;
    info!(
        "aligned {} stations over {} forecast files",
        dataset.registry.len(),
        dataset.forecasts.len()
    );
    Ok(dataset)
}

fn load_clustering(cfg: &RunConfig) -> Result<Clustering> {
    let path = cfg.clustering_path();
    if !path.exists() {
        return Err(Error::Config(format!(
            "clustering {} not found; run the cluster command first",
            path.display()
        )));
    }
    Clustering::load(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub models: BTreeMap<usize, String>,
    pub empty_clusters: Vec<usize>,
    pub split: DateSplit,
}

/// Train one triad model per non-empty cluster.
pub fn run_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let clustering = load_clustering(cfg)?;
    let dataset = load_dataset(cfg)?;
    let split = holdout_split(&dataset, &cfg.holdout)?;
    let window = cfg.train.window()?;
    let results: Vec<Result<Option<TriadModel>>> = (0..clustering.k)
        .into_par_iter()
        .map(|c| {
            let data = build_cluster_dataset(&clustering, c, &dataset, &split, &window)?;
            if crate::window::Role::ALL.iter().any(|r| data.role(*r).is_empty()) {
                warn!("cluster {c}: not enough samples, no model trained");
                return Ok(None);
            }
            train_triad(&data, &cfg.train).map(Some)
        })
        .collect();
    let dir = cfg.models_dir();
    let mut models = BTreeMap::new();
    let mut empty = Vec::new();
    for (c, r) in results.into_iter().enumerate() {
        match r? {
            Some(m) => {
                let name = model_file_name(c);
                m.save(dir.join(&name))?;
                models.insert(c, name);
            }
            None => empty.push(c),
        }
    }
    if models.is_empty() {
        return Err(Error::Data("every cluster is empty; nothing to train".into()));
    }
    let mut manifest = Manifest::new("train", cfg.seed, cfg)?;
    manifest.outputs = models.values().cloned().collect();
    manifest.details = serde_json::json!({
        "clustering": cfg.clustering_path(),
        "models": models,
        "empty_clusters": empty,
        "train_dates": split.train.len(),
        "test_dates": split.test,
        "excluded_dates": split.excluded.len(),
    });
    manifest.save(dir.join(MANIFEST))?;
    Ok(TrainSummary {
        models,
        empty_clusters: empty,
        split,
    })
}

/// Models listed by the training manifest, keyed by cluster.
pub fn load_models(dir: &Path) -> Result<BTreeMap<usize, TriadModel>> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.exists() {
        return Err(Error::Config(format!(
            "model manifest {} not found; run the train command first",
            manifest_path.display()
        )));
    }
    let manifest = Manifest::load(&manifest_path)?;
    let listed: BTreeMap<usize, String> =
        serde_json::from_value(manifest.details["models"].clone())?;
    listed
        .into_iter()
        .map(|(c, name)| Ok((c, TriadModel::load(dir.join(name))?)))
        .collect()
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

/// Write `report.csv` and `tables.txt` into `dir`.
pub fn write_report_files(report: &EvalReport, dir: &Path, label: &str) -> Result<()> {
    write_with(&dir.join("report.csv"), |b| write_report_csv(report, b))?;
    write_atomic(dir.join("tables.txt"), render_tables(report, label).as_bytes())
}

fn write_plots(rows: &[PredictionRow], dir: &Path) -> Result<usize> {
    let mut days: BTreeMap<(&str, NaiveDate), Vec<PredictionRow>> = BTreeMap::new();
    for r in rows {
        days.entry((&r.station_id, r.issue_date)).or_default().push(r.clone());
    }
    for ((station, date), rs) in &days {
        let name = format!("{station}_{date}.svg");
        write_atomic(dir.join(name), render_svg(rs, &format!("{station} {date}")).as_bytes())?;
    }
    Ok(days.len())
}

pub fn run_evaluate(cfg: &RunConfig, plots: bool) -> Result<EvalReport> {
    cfg.validate()?;
    if cfg.holdout.is_empty() {
        return Err(Error::Data("holdout date list is empty; nothing to evaluate".into()));
    }
    let clustering = load_clustering(cfg)?;
    let models = load_models(&cfg.models_dir())?;
    let dataset = load_dataset(cfg)?;
    holdout_split(&dataset, &cfg.holdout)?;
    for c in 0..clustering.k {
        if !models.contains_key(&c) && !clustering.members(c).is_empty() {
            warn!("cluster {c} has stations but no model; its stations are skipped");
        }
    }
    let (report, rows) = evaluate(&models, &clustering, &dataset, &cfg.holdout)?;
    let dir = cfg.eval_dir();
    let label = format!("k={} {}", cfg.k, cfg.features);
    write_report_files(&report, &dir, &label)?;
    write_with(&dir.join("predictions.csv"), |b| write_predictions(&rows, b))?;
    let mut outputs = vec!["report.csv".into(), "tables.txt".into(), "predictions.csv".into()];
    if plots {
        let n = write_plots(&rows, &dir.join("plots"))?;
        outputs.push(format!("plots/ ({n} files)"));
    }
    let mut manifest = Manifest::new("evaluate", cfg.seed, cfg)?;
    manifest.outputs = outputs;
    manifest.details = serde_json::json!({
        "evaluated_hours": report.evaluated_hours,
        "skipped_hours": report.skipped_hours,
        "skipped_stations": report.skipped_stations,
        "forecast_rmse": report.aggregate.forecast_rmse,
        "corrected_rmse": report.aggregate.corrected_rmse,
    });
    manifest.save(dir.join(MANIFEST))?;
    Ok(report)
}

/// Rebuild `report.csv` and `tables.txt` from a predictions file.
pub fn run_report(
    predictions: &Path,
    out: &Path,
    pollutant: Pollutant,
    label: &str,
) -> Result<EvalReport> {
    let text = read_text(predictions)?;
    let rows = read_predictions(text.as_bytes(), &predictions.display().to_string())?;
    let report = report_from_predictions(pollutant, &rows, BTreeMap::new())?;
    write_report_files(&report, out, label)?;
    let mut manifest = Manifest::new(
        "report",
        0,
        &serde_json::json!({
            "predictions": predictions,
            "pollutant": pollutant,
            "label": label,
        }),
    )?;
    manifest.outputs = vec!["report.csv".into(), "tables.txt".into()];
    manifest.save(out.join(MANIFEST))?;
    Ok(report)
}
