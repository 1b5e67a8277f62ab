//! Training pairs that never leave a single 48-hour forecast file.
//!
//! A window covers file hours `i..=i+n`. From it come three pairs: the
//! observation at hour `i` (pre role), at `i + ceil(n/2)` (mid role) and at
//! `i + n` (end role). At correction time the hour being corrected picks the
//! role: the first `n` hours of a file use the pre network, the last `n` the
//! end network and everything in between the mid network. The pre network
//! sees its window reversed, so the hour it corrects is the last one fed.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::series::{
    format_timestamp, AlignedDataset, FeatureVector, ForecastFile, ObservationSeries, StationForecast,
    FILE_HOURS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    /// Window span in hours; a window holds `n + 1` forecast vectors.
    pub n: usize,
    pub file_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n: 12,
            file_len: FILE_HOURS,
        }
    }
}

impl WindowConfig {
    pub fn new(n: usize) -> Result<Self> {
        let cfg = Self {
            n,
            file_len: FILE_HOURS,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.n + 1 > self.file_len || 2 * self.n > self.file_len {
            return Err(Error::Config(format!(
                "window span n = {} must satisfy 1 <= n and 2n <= {}",
                self.n, self.file_len
            )));
        }
        Ok(())
    }

    pub fn window_len(&self) -> usize {
        self.n + 1
    }

    /// Offset of the mid target inside a window, `ceil(n / 2)`.
    pub fn mid_offset(&self) -> usize {
        self.n.div_ceil(2)
    }

    /// Number of window start positions in one file.
    pub fn positions(&self) -> usize {
        self.file_len - self.n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Pre,
    Mid,
    End,
}

impl Role {
    pub const ALL: [Role; 3] = [Role::Pre, Role::Mid, Role::End];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Offset of this role's target within a window.
    pub fn target_offset(self, cfg: &WindowConfig) -> usize {
        match self {
            Role::Pre => 0,
            Role::Mid => cfg.mid_offset(),
            Role::End => cfg.n,
        }
    }

    pub fn reversed(self) -> bool {
        self == Role::Pre
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Pre => "pre",
            Role::Mid => "mid",
            Role::End => "end",
        })
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(Role::Pre),
            "mid" => Ok(Role::Mid),
            "end" => Ok(Role::End),
            other => Err(Error::Argument(format!("unknown role `{other}`"))),
        }
    }
}

/// Role responsible for correcting a given file hour.
pub fn correction_role(hour: usize, cfg: &WindowConfig) -> Result<Role> {
    if hour >= cfg.file_len {
        return Err(Error::Argument(format!(
            "hour {hour} outside 0..{}",
            cfg.file_len
        )));
    }
    Ok(if hour < cfg.n {
        Role::Pre
    } else if hour >= cfg.file_len - cfg.n {
        Role::End
    } else {
        Role::Mid
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceWindow {
    pub start: usize,
    pub role: Role,
    pub reversed: bool,
}

impl InferenceWindow {
    /// Last file hour covered (inclusive).
    pub fn end(&self, cfg: &WindowConfig) -> usize {
        self.start + cfg.n
    }
}

/// Window used to correct `hour`.
pub fn inference_window(hour: usize, cfg: &WindowConfig) -> Result<InferenceWindow> {
    let role = correction_role(hour, cfg)?;
    let start = hour
        .checked_sub(role.target_offset(cfg))
        .ok_or_else(|| Error::Internal(format!("window for hour {hour} starts before the file")))?;
    if start + cfg.n >= cfg.file_len {
        return Err(Error::Internal(format!(
            "window for hour {hour} runs past the end of the file"
        )));
    }
    Ok(InferenceWindow {
        start,
        role,
        reversed: role.reversed(),
    })
}

pub fn reverse_window<T: Clone>(window: &[T]) -> Vec<T> {
    window.iter().rev().cloned().collect()
}

/// A window position and role with its valid target, before feature
/// vectors are materialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRef {
    pub start: usize,
    pub role: Role,
    /// File hour of the target observation.
    pub target_index: usize,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterCounts {
    pub windows: usize,
    pub windows_with_invalid_forecast: usize,
    pub targets_invalid: usize,
    pub samples: usize,
}

impl std::ops::AddAssign for FilterCounts {
    fn add_assign(&mut self, o: Self) {
        self.windows += o.windows;
        self.windows_with_invalid_forecast += o.windows_with_invalid_forecast;
        self.targets_invalid += o.targets_invalid;
        self.samples += o.samples;
    }
}

/// Window positions and roles with valid forecasts and targets for one
/// station's slice of a forecast file.
pub fn triad_refs(
    forecast: &StationForecast,
    file_start: DateTime<Utc>,
    obs: &ObservationSeries,
    cfg: &WindowConfig,
) -> (Vec<WindowRef>, FilterCounts) {
    let mut counts = FilterCounts::default();
    let mut out = Vec::new();
    for start in 0..cfg.positions() {
        counts.windows += 1;
        if !forecast.all_valid(start, start + cfg.n) {
            counts.windows_with_invalid_forecast += 1;
            continue;
        }
        for role in Role::ALL {
            let target_index = start + role.target_offset(cfg);
            let t = file_start + chrono::Duration::hours(target_index as i64);
            match obs.at(t) {
                Some(target) => out.push(WindowRef {
                    start,
                    role,
                    target_index,
                    target,
                }),
                None => counts.targets_invalid += 1,
            }
        }
    }
    counts.samples = out.len();
    (out, counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriadSample {
    pub station_id: String,
    pub issue_date: NaiveDate,
    pub start_hour: usize,
    pub role: Role,
    /// File hours `start_hour..=start_hour + n` in file order.
    pub window: Vec<FeatureVector>,
    pub target: f64,
    pub target_hour: DateTime<Utc>,
}

/// All triad samples for the observed station in one forecast file.
pub fn triad_windows(
    file: &ForecastFile,
    obs: &ObservationSeries,
    cfg: &WindowConfig,
) -> (Vec<TriadSample>, FilterCounts) {
    let Some(forecast) = file.station(&obs.station_id) else {
        return (Vec::new(), FilterCounts::default());
    };
    let (refs, counts) = triad_refs(forecast, file.start_time(), obs, cfg);
    let samples = refs
        .into_iter()
        .map(|r| TriadSample {
            station_id: obs.station_id.clone(),
            issue_date: file.issue_date,
            start_hour: r.start,
            role: r.role,
            window: forecast.hours[r.start..=r.start + cfg.n].to_vec(),
            target: r.target,
            target_hour: file.hour_time(r.target_index),
        })
        .collect();
    (samples, counts)
}

pub fn write_sample_dump<W: Write>(samples: &[TriadSample], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing sample dump: {e}"));
    w.write_record(["station_id", "issue_date", "start_hour", "role", "target_hour", "target"])
        .map_err(err)?;
    for s in samples {
        w.write_record([
            s.station_id.clone(),
            s.issue_date.to_string(),
            s.start_hour.to_string(),
            s.role.to_string(),
            format_timestamp(s.target_hour),
            s.target.to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Held-out ozone evaluation days used for the 2019 AirNow runs.
pub const HOLDOUT_DATES_2019: [(i32, u32, u32); 10] = [
    (2019, 7, 13),
    (2019, 7, 23),
    (2019, 8, 4),
    (2019, 8, 18),
    (2019, 9, 8),
    (2019, 9, 20),
    (2019, 10, 1),
    (2019, 10, 30),
    (2019, 11, 9),
    (2019, 11, 22),
];

pub fn holdout_dates_2019() -> Vec<NaiveDate> {
    HOLDOUT_DATES_2019
        .iter()
        .map(|(y, m, d)| NaiveDate::from_ymd_opt(*y, *m, *d).expect("valid calendar date"))
        .collect()
}

/// December files never supply training days.
pub fn is_excluded_month(date: NaiveDate) -> bool {
    date.month() == 12
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSplit {
    pub train: Vec<NaiveDate>,
    pub test: Vec<NaiveDate>,
    pub excluded: Vec<NaiveDate>,
}

impl DateSplit {
    pub fn is_train(&self, date: NaiveDate) -> bool {
        self.train.binary_search(&date).is_ok()
    }
}

pub fn split_dates(all: &[NaiveDate], holdout: &[NaiveDate]) -> Result<DateSplit> {
    let all_set: BTreeSet<NaiveDate> = all.iter().copied().collect();
    let hold: BTreeSet<NaiveDate> = holdout.iter().copied().collect();
    for d in &hold {
        if !all_set.contains(d) {
            return Err(Error::Config(format!("holdout date {d} has no forecast file")));
        }
        if is_excluded_month(*d) {
            return Err(Error::Config(format!(
                "holdout date {d} falls in December, which is excluded"
            )));
        }
    }
    let mut split = DateSplit {
        train: Vec::new(),
        test: Vec::new(),
        excluded: Vec::new(),
    };
    for d in all_set {
        if is_excluded_month(d) {
            split.excluded.push(d);
        } else if hold.contains(&d) {
            split.test.push(d);
        } else {
            split.train.push(d);
        }
    }
    Ok(split)
}

pub fn holdout_split(dataset: &AlignedDataset, holdout: &[NaiveDate]) -> Result<DateSplit> {
    split_dates(&dataset.dates(), holdout)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::series::{Pollutant, StationForecast};
    use chrono::{Duration, TimeZone};

    fn date(s: &str) -> NaiveDate {
        NaiveDate::parse_from_str(s, "%Y-%m-%d").unwrap()
    }

    /// File whose hour-h vector carries h in its first slot, and an
    /// observation series valued at the absolute hour offset.
    fn world(obs_valid: bool) -> (ForecastFile, ObservationSeries) {
        let p = Pollutant::Pm25;
        let mut file = ForecastFile::new(date("2019-07-01"), p);
        let mut sf = StationForecast::empty(p);
        for h in 0..FILE_HOURS {
            sf.hours[h].0[0] = h as f64;
            sf.valid[h] = true;
        }
        file.stations.insert("A".into(), sf);
        let start = Utc.with_ymd_and_hms(2019, 7, 1, 0, 0, 0).unwrap();
        let len = 80;
        let obs = ObservationSeries {
            station_id: "A".into(),
            start_time: start,
            values: (0..len).map(|i| i as f64).collect(),
            valid: vec![obs_valid; len],
        };
        (file, obs)
    }

    #[test]
    fn full_file_yields_108_samples() {
        let (file, obs) = world(true);
        let cfg = WindowConfig::default();
        // brute-force enumeration of starts and roles
        let mut expected = 0;
        for i in 0..FILE_HOURS {
            if i + 12 < FILE_HOURS {
                expected += 3;
            }
        }
        let (samples, counts) = triad_windows(&file, &obs, &cfg);
        assert_eq!(expected, 108);
        assert_eq!(samples.len(), 108);
        assert_eq!(counts.windows, 36);
    }

    #[test]
    fn invalid_observations_yield_nothing() {
        let (file, obs) = world(false);
        let (samples, counts) = triad_windows(&file, &obs, &WindowConfig::default());
        assert!(samples.is_empty());
        assert_eq!(counts.targets_invalid, 108);
    }

    #[test]
    fn pairs_use_expected_targets() {
        let (file, obs) = world(true);
        let cfg = WindowConfig::default();
        let (samples, _) = triad_windows(&file, &obs, &cfg);
        for s in &samples {
            let i = s.start_hour;
            let want = match s.role {
                Role::Pre => i,
                Role::Mid => i + 6,
                Role::End => i + 12,
            };
            assert_eq!(s.target_hour, file.hour_time(want));
            // observation value = hours since midnight; file starts at 13:00
            assert_eq!(s.target, (13 + want) as f64);
            assert_eq!(s.window.len(), 13);
            assert_eq!(s.window[0].0[0], i as f64);
            assert_eq!(s.window[12].0[0], (i + 12) as f64);
        }
    }

    #[test]
    fn invalid_forecast_hour_kills_window() {
        let (mut file, obs) = world(true);
        file.stations.get_mut("A").unwrap().valid[20] = false;
        let cfg = WindowConfig::default();
        let (samples, counts) = triad_windows(&file, &obs, &cfg);
        // starts 8..=20 touch hour 20
        assert_eq!(counts.windows_with_invalid_forecast, 13);
        assert_eq!(samples.len(), 3 * (36 - 13));
    }

    #[test]
    fn single_invalid_target_drops_only_that_role() {
        let (file, mut obs) = world(true);
        // file hour 0 is absolute hour 13
        obs.valid[13] = false;
        let (samples, _) = triad_windows(&file, &obs, &WindowConfig::default());
        assert_eq!(samples.len(), 107);
        assert!(!samples.iter().any(|s| s.start_hour == 0 && s.role == Role::Pre));
    }

    #[test]
    fn roles_by_hour() {
        let cfg = WindowConfig::default();
        assert_eq!(correction_role(5, &cfg).unwrap(), Role::Pre);
        assert_eq!(correction_role(20, &cfg).unwrap(), Role::Mid);
        assert_eq!(correction_role(40, &cfg).unwrap(), Role::End);
        assert!(correction_role(48, &cfg).is_err());
    }

    #[test]
    fn role_zones_partition_the_file() {
        for n in 1..=24 {
            let cfg = WindowConfig::new(n).unwrap();
            let mut sizes = [0; 3];
            for h in 0..FILE_HOURS {
                sizes[correction_role(h, &cfg).unwrap().index()] += 1;
                let w = inference_window(h, &cfg).unwrap();
                assert!(w.end(&cfg) < FILE_HOURS);
                assert_eq!(w.start + w.role.target_offset(&cfg), h);
            }
            assert_eq!(sizes, [n, FILE_HOURS - 2 * n, n]);
        }
    }

    #[test]
    fn inference_windows() {
        let cfg = WindowConfig::default();
        assert_eq!(
            inference_window(0, &cfg).unwrap(),
            InferenceWindow { start: 0, role: Role::Pre, reversed: true }
        );
        assert_eq!(
            inference_window(47, &cfg).unwrap(),
            InferenceWindow { start: 35, role: Role::End, reversed: false }
        );
        assert_eq!(
            inference_window(24, &cfg).unwrap(),
            InferenceWindow { start: 18, role: Role::Mid, reversed: false }
        );
    }

    #[test]
    fn reversal() {
        assert_eq!(reverse_window(&['a', 'b', 'c']), vec!['c', 'b', 'a']);
        let w = vec![1, 2, 3, 4];
        assert_eq!(reverse_window(&reverse_window(&w)), w);
        // after reversal the pre target hour is the last element
        let (file, obs) = world(true);
        let (samples, _) = triad_windows(&file, &obs, &WindowConfig::default());
        let pre = samples.iter().find(|s| s.role == Role::Pre).unwrap();
        let rev = reverse_window(&pre.window);
        assert_eq!(rev.last().unwrap().0[0], pre.start_hour as f64);
    }

    #[test]
    fn window_config_bounds() {
        assert!(WindowConfig::new(0).is_err());
        assert!(WindowConfig::new(25).is_err());
        assert!(WindowConfig::new(24).is_ok());
        assert_eq!(WindowConfig::new(5).unwrap().mid_offset(), 3);
    }

    #[test]
    fn reference_holdout_days() {
        let days = holdout_dates_2019();
        assert_eq!(days.len(), 10);
        assert_eq!(days[0], date("2019-07-13"));
        assert_eq!(days[9], date("2019-11-22"));
        let all: Vec<NaiveDate> = (0..184).map(|i| date("2019-07-01") + Duration::days(i)).collect();
        let split = split_dates(&all, &days).unwrap();
        assert_eq!(split.test, days);
        assert_eq!(split.excluded.len(), 31);
        assert_eq!(split.train.len(), 184 - 31 - 10);
    }

    #[test]
    fn split_errors_and_noop() {
        let all = vec![date("2019-07-01"), date("2019-07-02"), date("2019-12-02")];
        let split = split_dates(&all, &[]).unwrap();
        assert_eq!(split.train.len(), 2);
        assert!(split.test.is_empty());
        assert!(split_dates(&all, &[date("2019-07-05")]).is_err());
        assert!(split_dates(&all, &[date("2019-12-02")]).is_err());
    }

    #[test]
    fn sample_dump_format() {
        let (file, obs) = world(true);
        let (samples, _) = triad_windows(&file, &obs, &WindowConfig::default());
        let mut buf = Vec::new();
        write_sample_dump(&samples[..2], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("station_id,issue_date,start_hour,role,target_hour,target"));
        assert_eq!(lines.next(), Some("A,2019-07-01,0,pre,2019-07-01T13:00:00Z,13"));
    }
}
