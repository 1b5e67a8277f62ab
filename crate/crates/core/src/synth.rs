//! Synthetic stations, observations and forecast files with a known bias.
//!
//! Truth at a station is a function of absolute time only:
//! `baseline + region_offset + diurnal(hod) + anomaly_region(t)`, where the
//! anomaly is a piecewise-linear curve through daily random knots.
//!
//! A forecast hour adds three things to the truth:
//! - a systematic bias `A sin(2 pi (hod - phase_r) / 24)` whose phase depends
//!   on the station's latent region
//! - a per-file run state `z = +/-1` that alternates between consecutive
//!   issue dates and shifts the concentration by `z J / 2`, so overlapping
//!   hours of consecutive files differ by exactly `J`
//! - independent Gaussian noise
//!
//! The run state also leaks, with noise, into secondary chemistry variables
//! (`nox`/`noy` for ozone, `rc_rn` for PM2.5), which makes it inferable from
//! a window of forecast hours belonging to a single file.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{
    forecast_file_name, issue_start, write_forecast_file, write_observations, FeatureVector,
    ForecastFile, ObservationSeries, Pollutant, StationForecast, Variable, FILE_HOURS,
};
use crate::station::{write_station_metadata, Station, StationRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub pollutant: Pollutant,
    pub stations: usize,
    pub start_date: NaiveDate,
    pub days: usize,
    pub seed: u64,
    /// Number of latent regions, laid out as spatial blobs.
    pub regions: usize,
    /// Standard deviation of station positions around their blob center.
    pub region_spread_deg: f64,
    pub baseline: f64,
    /// Distance between the lowest and highest region truth offsets.
    pub region_offset_range: f64,
    pub diurnal_amplitude: f64,
    pub day_anomaly_std: f64,
    pub bias_amplitude: f64,
    /// Hour of day at which region 0's bias crosses zero upward; region `r`
    /// is shifted by `24 r / regions` hours.
    pub bias_phase_hours: f64,
    pub obs_noise_std: f64,
    pub forecast_noise_std: f64,
    pub jump_amplitude: f64,
    pub run_marker_gain: f64,
    pub run_marker_noise_std: f64,
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            pollutant: Pollutant::Ozone,
            stations: 40,
            start_date: NaiveDate::from_ymd_opt(2019, 7, 1).expect("valid date"),
            days: 60,
            seed: 7,
            regions: 4,
            region_spread_deg: 0.8,
            baseline: 40.0,
            region_offset_range: 8.0,
            diurnal_amplitude: 15.0,
            day_anomaly_std: 4.0,
            bias_amplitude: 8.0,
            bias_phase_hours: 0.0,
            obs_noise_std: 2.0,
            forecast_noise_std: 2.0,
            jump_amplitude: 10.0,
            run_marker_gain: 2.0,
            run_marker_noise_std: 4.0,
            missing_rate: 0.05,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stations == 0 {
            return Err(Error::Argument("synthetic world needs at least one station".into()));
        }
        if self.days == 0 {
            return Err(Error::Argument("synthetic world needs at least one day".into()));
        }
        if self.regions == 0 || self.regions > self.stations {
            return Err(Error::Argument(format!(
                "regions = {} must lie in 1..={}",
                self.regions, self.stations
            )));
        }
        let non_negative = [
            ("region_spread_deg", self.region_spread_deg),
            ("region_offset_range", self.region_offset_range),
            ("diurnal_amplitude", self.diurnal_amplitude),
            ("day_anomaly_std", self.day_anomaly_std),
            ("bias_amplitude", self.bias_amplitude),
            ("obs_noise_std", self.obs_noise_std),
            ("forecast_noise_std", self.forecast_noise_std),
            ("jump_amplitude", self.jump_amplitude),
            ("run_marker_gain", self.run_marker_gain),
            ("run_marker_noise_std", self.run_marker_noise_std),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Argument(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        if !(0.0..1.0).contains(&self.missing_rate) {
            return Err(Error::Argument(format!(
                "missing_rate {} outside [0, 1)",
                self.missing_rate
            )));
        }
        if !self.baseline.is_finite() || !self.bias_phase_hours.is_finite() {
            return Err(Error::Argument("baseline and bias phase must be finite".into()));
        }
        Ok(())
    }

    pub fn dates(&self) -> Vec<NaiveDate> {
        (0..self.days)
            .map(|d| self.start_date + Duration::days(d as i64))
            .collect()
    }

    pub fn station_id(i: usize) -> String {
        format!("S{i:03}")
    }

    /// Latent region of station `i`.
    pub fn region_of(&self, i: usize) -> usize {
        i % self.regions
    }

    pub fn region_phase(&self, region: usize) -> f64 {
        self.bias_phase_hours + 24.0 * region as f64 / self.regions as f64
    }

    /// Systematic forecast bias for a region at an hour of day.
    pub fn bias(&self, region: usize, hod: f64) -> f64 {
        self.bias_amplitude * (TAU * (hod - self.region_phase(region)) / 24.0).sin()
    }

    fn region_offset(&self, region: usize) -> f64 {
        if self.regions == 1 {
            return 0.0;
        }
        self.region_offset_range * (region as f64 / (self.regions - 1) as f64 - 0.5)
    }

    fn region_center(&self, region: usize) -> (f64, f64) {
        let a = TAU * region as f64 / self.regions as f64;
        (38.0 + 6.0 * a.sin(), -95.0 + 12.0 * a.cos())
    }
}

/// Error levels implied by a configuration, in concentration units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthExpectations {
    /// Root mean square of forecast minus observation.
    pub forecast_rmse: f64,
    /// Same, with noise removed: RMS of bias plus jump offset.
    pub systematic_rms: f64,
    /// RMSE of the forecast with bias and run offset removed, leaving only
    /// forecast and observation noise. A correction that also smooths the
    /// forecast noise using neighboring hours can go below this.
    pub debiased_forecast_rmse: f64,
}

/// Closed-form error levels. Over the 48 hours of a file the sinusoidal bias
/// has mean square `A^2 / 2` and is orthogonal to the constant run offset of
/// magnitude `J / 2`; noise terms are independent of both.
pub fn expected_errors(cfg: &SynthConfig) -> SynthExpectations {
    let systematic = cfg.bias_amplitude.powi(2) / 2.0 + cfg.jump_amplitude.powi(2) / 4.0;
    let noise = cfg.forecast_noise_std.powi(2) + cfg.obs_noise_std.powi(2);
    SynthExpectations {
        forecast_rmse: (systematic + noise).sqrt(),
        systematic_rms: systematic.sqrt(),
        debiased_forecast_rmse: noise.sqrt(),
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub registry: StationRegistry,
    pub observations: BTreeMap<String, ObservationSeries>,
    pub forecasts: Vec<ForecastFile>,
    /// Per station, in index order.
    pub regions: Vec<usize>,
    /// Run-state sign of each station's first file.
    pub run_sign: Vec<f64>,
    /// Daily anomaly knots per region, starting one day before the first
    /// issue date at 00:00 UTC.
    anomaly_knots: Vec<Vec<f64>>,
}

fn hour_of_day(t: DateTime<Utc>) -> f64 {
    t.hour() as f64
}

impl SynthWorld {
    fn knot_origin(&self) -> DateTime<Utc> {
        knot_origin(&self.config)
    }

    pub fn station_index(&self, station_id: &str) -> Result<usize> {
        station_id
            .strip_prefix('S')
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|i| *i < self.config.stations)
            .ok_or_else(|| Error::Argument(format!("unknown synthetic station `{station_id}`")))
    }

    fn day_index(&self, date: NaiveDate) -> Result<usize> {
        let d = (date - self.config.start_date).num_days();
        if d < 0 || d as usize >= self.config.days {
            return Err(Error::Argument(format!("{date} outside the generated range")));
        }
        Ok(d as usize)
    }

    /// Noise-free concentration at a station and absolute hour.
    pub fn truth(&self, station_id: &str, t: DateTime<Utc>) -> Result<f64> {
        let i = self.station_index(station_id)?;
        Ok(truth_at(&self.config, &self.anomaly_knots, self.regions[i], t, self.knot_origin()))
    }

    /// Systematic bias injected into the forecast concentration at file hour
    /// `hour` of the file issued on `date`. Excludes noise and the run offset.
    pub fn oracle_bias(&self, station_id: &str, date: NaiveDate, hour: usize) -> Result<f64> {
        let i = self.station_index(station_id)?;
        self.day_index(date)?;
        if hour >= FILE_HOURS {
            return Err(Error::Argument(format!("hour {hour} outside 0..{FILE_HOURS}")));
        }
        let t = issue_start(date) + Duration::hours(hour as i64);
        Ok(self.config.bias(self.regions[i], hour_of_day(t)))
    }

    /// Run state `+/-1` of a station's file.
    pub fn run_state(&self, station_id: &str, date: NaiveDate) -> Result<f64> {
        let i = self.station_index(station_id)?;
        let d = self.day_index(date)?;
        Ok(run_state(self.run_sign[i], d))
    }

    /// Concentration offset applied to every hour of a station's file.
    pub fn jump_offset(&self, station_id: &str, date: NaiveDate) -> Result<f64> {
        Ok(self.run_state(station_id, date)? * self.config.jump_amplitude / 2.0)
    }

    /// Write `stations.csv`, `observations.csv` and one
    /// `forecast_YYYY-MM-DD.csv` per issue date into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let create = |name: &str| {
            let p = dir.join(name);
            fs::File::create(&p)
                .map(std::io::BufWriter::new)
                .map_err(|e| Error::io(p, e))
        };
        write_station_metadata(&self.registry, create("stations.csv")?)?;
        write_observations(self.observations.values(), create("observations.csv")?)?;
        for f in &self.forecasts {
            write_forecast_file(f, create(&forecast_file_name(f.issue_date))?)?;
        }
        Ok(())
    }
}

fn run_state(first_sign: f64, day: usize) -> f64 {
    if day % 2 == 0 {
        first_sign
    } else {
        -first_sign
    }
}

fn knot_origin(cfg: &SynthConfig) -> DateTime<Utc> {
    issue_start(cfg.start_date) - Duration::hours(13 + 24)
}

fn truth_at(
    cfg: &SynthConfig,
    knots: &[Vec<f64>],
    region: usize,
    t: DateTime<Utc>,
    origin: DateTime<Utc>,
) -> f64 {
    let hours = (t - origin).num_hours() as f64;
    let pos = hours / 24.0;
    let k = pos.floor() as usize;
    let frac = pos - k as f64;
    let series = &knots[region];
    let anomaly = series[k] * (1.0 - frac) + series[k + 1] * frac;
    let diurnal = cfg.diurnal_amplitude * (TAU * (hour_of_day(t) - 12.0) / 24.0).sin();
    cfg.baseline + cfg.region_offset(region) + diurnal + anomaly
}

fn normal(std: f64) -> Normal<f64> {
    Normal::new(0.0, std).expect("validated non-negative std")
}

/// Build the world in memory. A pure function of the configuration.
pub fn generate_world(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let unit = normal(1.0);

    let regions: Vec<usize> = (0..cfg.stations).map(|i| cfg.region_of(i)).collect();
    let mut stations = Vec::with_capacity(cfg.stations);
    for (i, &r) in regions.iter().enumerate() {
        let (clat, clon) = cfg.region_center(r);
        let mut s = Station::new(
            SynthConfig::station_id(i),
            (clat + cfg.region_spread_deg * unit.sample(&mut rng)).clamp(-90.0, 90.0),
            (clon + cfg.region_spread_deg * unit.sample(&mut rng)).clamp(-180.0, 180.0),
        );
        s.elevation = Some((150.0 + 300.0 * r as f64 + 40.0 * unit.sample(&mut rng)).max(0.0));
        s.ruca = Some(1 + (i % 10) as u8);
        stations.push(s);
    }
    let run_sign: Vec<f64> = (0..cfg.stations)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    // knots cover one day before the first file through the last file's end
    let n_knots = cfg.days + 4;
    let anomaly = normal(cfg.day_anomaly_std);
    let knots: Vec<Vec<f64>> = (0..cfg.regions)
        .map(|_| (0..n_knots).map(|_| anomaly.sample(&mut rng)).collect())
        .collect();
    let origin = knot_origin(cfg);

    let obs_start = issue_start(cfg.start_date);
    let obs_len = (cfg.days - 1) * 24 + FILE_HOURS;
    let obs_noise = normal(cfg.obs_noise_std);
    let mut observations = BTreeMap::new();
    for i in 0..cfg.stations {
        let id = SynthConfig::station_id(i);
        let mut values = Vec::with_capacity(obs_len);
        let mut valid = Vec::with_capacity(obs_len);
        for k in 0..obs_len {
            let t = obs_start + Duration::hours(k as i64);
            let truth = truth_at(cfg, &knots, regions[i], t, origin);
            let value = (truth + obs_noise.sample(&mut rng)).max(0.0);
            let ok = rng.random::<f64>() >= cfg.missing_rate;
            values.push(if ok { value } else { 0.0 });
            valid.push(ok);
        }
        observations.insert(
            id.clone(),
            ObservationSeries {
                station_id: id,
                start_time: obs_start,
                values,
                valid,
            },
        );
    }

    let fc_noise = normal(cfg.forecast_noise_std);
    let marker_noise = normal(cfg.run_marker_noise_std);
    let p = cfg.pollutant;
    let mut forecasts = Vec::with_capacity(cfg.days);
    for (d, date) in cfg.dates().into_iter().enumerate() {
        let mut file = ForecastFile::new(date, p);
        for i in 0..cfg.stations {
            let r = regions[i];
            let z = run_state(run_sign[i], d);
            let mut sf = StationForecast::empty(p);
            let mut wd = rng.random_range(0.0..360.0);
            for h in 0..FILE_HOURS {
                let t = file.hour_time(h);
                let hod = hour_of_day(t);
                let phase = TAU * hod / 24.0;
                let truth = truth_at(cfg, &knots, r, t, origin);
                let conc = truth + cfg.bias(r, hod) + z * cfg.jump_amplitude / 2.0
                    + fc_noise.sample(&mut rng);
                let marker = |rng: &mut ChaCha8Rng| {
                    z * cfg.run_marker_gain + marker_noise.sample(rng)
                };
                let mut fv = FeatureVector::zeros(p);
                wd = (wd + 20.0 * unit.sample(&mut rng)).rem_euclid(360.0);
                if wd >= 360.0 {
                    wd = 0.0;
                }
                for (k, v) in p.variables().iter().enumerate() {
                    fv.0[k] = match v {
                        Variable::Ozone | Variable::Pm25 => conc,
                        Variable::Temperature => {
                            24.0 + 6.0 * (phase - TAU * 12.0 / 24.0).sin() + unit.sample(&mut rng)
                        }
                        Variable::GroundRadiation => {
                            (850.0 * (phase - TAU * 18.0 / 24.0).cos() + 30.0 * unit.sample(&mut rng))
                                .max(0.0)
                        }
                        Variable::PblHeight => {
                            (700.0 + 600.0 * (phase - TAU * 20.0 / 24.0).cos()
                                + 50.0 * unit.sample(&mut rng))
                            .max(50.0)
                        }
                        Variable::WindDirection => wd,
                        Variable::WindSpeed => (3.0 + unit.sample(&mut rng)).abs(),
                        Variable::Nox => 12.0 + 3.0 * phase.cos() + marker(&mut rng),
                        Variable::Noy => 18.0 + 4.0 * phase.cos() + marker(&mut rng),
                        Variable::TimeOfDay => hod,
                        Variable::RcRn => 1.0 + marker(&mut rng),
                    };
                }
                sf.hours[h] = fv;
                sf.valid[h] = true;
            }
            file.stations.insert(SynthConfig::station_id(i), sf);
        }
        forecasts.push(file);
    }

    Ok(SynthWorld {
        config: cfg.clone(),
        registry: StationRegistry::new(stations)?,
        observations,
        forecasts,
        regions,
        run_sign,
        anomaly_knots: knots,
    })
}
