//! Hourly observation series and daily 48-hour forecast files.
//!
//! Forecast hour `h` of the file issued on date `d` is valid at
//! `d 13:00 UTC + h hours`; observations are matched on that absolute time.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, NaiveTime, TimeZone, Timelike, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::station::StationRegistry;

pub const FILE_HOURS: usize = 48;
pub const ISSUE_HOUR_UTC: u32 = 13;
pub const INVALID_SENTINEL: f64 = -999.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pollutant {
    Ozone,
    Pm25,
}

impl Pollutant {
    /// Forecast variables in canonical column order.
    pub fn variables(self) -> &'static [Variable] {
        use Variable::*;
        match self {
            Pollutant::Ozone => &[
                Ozone,
                Temperature,
                GroundRadiation,
                PblHeight,
                WindDirection,
                WindSpeed,
                Nox,
                Noy,
                TimeOfDay,
            ],
            Pollutant::Pm25 => &[Pm25, GroundRadiation, WindDirection, WindSpeed, TimeOfDay, RcRn],
        }
    }

    /// The forecast's own prediction of the observed concentration.
    pub fn concentration_variable(self) -> Variable {
        match self {
            Pollutant::Ozone => Variable::Ozone,
            Pollutant::Pm25 => Variable::Pm25,
        }
    }

    pub fn index_of(self, var: Variable) -> Option<usize> {
        self.variables().iter().position(|v| *v == var)
    }

    pub fn units(self) -> &'static str {
        match self {
            Pollutant::Ozone => "ppb",
            Pollutant::Pm25 => "ug/m3",
        }
    }
}

impl fmt::Display for Pollutant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pollutant::Ozone => "ozone",
            Pollutant::Pm25 => "pm25",
        })
    }
}

impl FromStr for Pollutant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ozone" | "o3" => Ok(Pollutant::Ozone),
            "pm25" | "pm2.5" => Ok(Pollutant::Pm25),
            other => Err(Error::Config(format!("unknown pollutant `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variable {
    Ozone,
    Pm25,
    Temperature,
    GroundRadiation,
    PblHeight,
    WindDirection,
    WindSpeed,
    Nox,
    Noy,
    TimeOfDay,
    RcRn,
}

impl Variable {
    pub fn column(self) -> &'static str {
        match self {
            Variable::Ozone => "ozone",
            Variable::Pm25 => "pm25",
            Variable::Temperature => "temperature",
            Variable::GroundRadiation => "ground_radiation",
            Variable::PblHeight => "pbl_height",
            Variable::WindDirection => "wind_direction",
            Variable::WindSpeed => "wind_speed",
            Variable::Nox => "nox",
            Variable::Noy => "noy",
            Variable::TimeOfDay => "time_of_day",
            Variable::RcRn => "rc_rn",
        }
    }

    /// Period of a cyclic variable (degrees or hours).
    pub fn period(self) -> Option<f64> {
        match self {
            Variable::WindDirection => Some(360.0),
            Variable::TimeOfDay => Some(24.0),
            _ => None,
        }
    }
}

/// One forecast hour's physical variables, ordered as
/// [`Pollutant::variables`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(pollutant: Pollutant) -> Self {
        Self(vec![0.0; pollutant.variables().len()])
    }

    pub fn get(&self, pollutant: Pollutant, var: Variable) -> Option<f64> {
        pollutant.index_of(var).map(|i| self.0[i])
    }

    pub fn validate(&self, pollutant: Pollutant) -> Result<()> {
        let vars = pollutant.variables();
        if self.0.len() != vars.len() {
            return Err(Error::Validation(format!(
                "feature vector has {} values, {pollutant} mode needs {}",
                self.0.len(),
                vars.len()
            )));
        }
        for (v, x) in vars.iter().zip(&self.0) {
            if !x.is_finite() {
                return Err(Error::Validation(format!("{} is not finite", v.column())));
            }
            if *v == Variable::WindDirection && !(0.0..360.0).contains(x) {
                return Err(Error::Validation(format!(
                    "wind_direction {x} outside [0, 360)"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSeries {
    pub station_id: String,
    pub start_time: DateTime<Utc>,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ObservationSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn end_time(&self) -> DateTime<Utc> {
        self.start_time + Duration::hours(self.values.len() as i64)
    }

    /// Valid value at an absolute hour, if any.
    pub fn at(&self, time: DateTime<Utc>) -> Option<f64> {
        let offset = (time - self.start_time).num_hours();
        if offset < 0 || (time - self.start_time) != Duration::hours(offset) {
            return None;
        }
        let i = offset as usize;
        (i < self.values.len() && self.valid[i]).then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        if self.values.is_empty() {
            return 1.0;
        }
        1.0 - self.valid_count() as f64 / self.values.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.valid.len() {
            return Err(Error::Validation(format!(
                "station {}: {} values but {} mask entries",
                self.station_id,
                self.values.len(),
                self.valid.len()
            )));
        }
        for (i, (v, ok)) in self.values.iter().zip(&self.valid).enumerate() {
            if *ok && !(v.is_finite() && *v >= 0.0) {
                return Err(Error::Validation(format!(
                    "station {}: hour {i} holds invalid concentration {v} marked valid",
                    self.station_id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationForecast {
    pub hours: Vec<FeatureVector>,
    pub valid: Vec<bool>,
}

impl StationForecast {
    pub fn empty(pollutant: Pollutant) -> Self {
        Self {
            hours: vec![FeatureVector::zeros(pollutant); FILE_HOURS],
            valid: vec![false; FILE_HOURS],
        }
    }

    /// True when every hour in `start..=end` is valid.
    pub fn all_valid(&self, start: usize, end: usize) -> bool {
        end < FILE_HOURS && self.valid[start..=end].iter().all(|v| *v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastFile {
    pub issue_date: NaiveDate,
    pub pollutant: Pollutant,
    pub stations: BTreeMap<String, StationForecast>,
}

pub fn issue_start(date: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_time(NaiveTime::from_hms_opt(ISSUE_HOUR_UTC, 0, 0).unwrap()))
}

impl ForecastFile {
    pub fn new(issue_date: NaiveDate, pollutant: Pollutant) -> Self {
        Self {
            issue_date,
            pollutant,
            stations: BTreeMap::new(),
        }
    }

    pub fn start_time(&self) -> DateTime<Utc> {
        issue_start(self.issue_date)
    }

    /// Absolute valid time of file hour `hour`.
    pub fn hour_time(&self, hour: usize) -> DateTime<Utc> {
        self.start_time() + Duration::hours(hour as i64)
    }

    pub fn station(&self, station_id: &str) -> Option<&StationForecast> {
        self.stations.get(station_id)
    }
}

/// Stations present in metadata, observations and forecasts, with their
/// data restricted to that intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDataset {
    pub pollutant: Pollutant,
    pub registry: StationRegistry,
    pub observations: BTreeMap<String, ObservationSeries>,
    /// Strictly increasing issue dates.
    pub forecasts: Vec<ForecastFile>,
}

impl AlignedDataset {
    pub fn dates(&self) -> Vec<NaiveDate> {
        self.forecasts.iter().map(|f| f.issue_date).collect()
    }

    pub fn forecast(&self, date: NaiveDate) -> Option<&ForecastFile> {
        self.forecasts
            .binary_search_by_key(&date, |f| f.issue_date)
            .ok()
            .map(|i| &self.forecasts[i])
    }
}

fn parse_timestamp(text: &str) -> Option<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(text) {
        return Some(t.with_timezone(&Utc));
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
        .map(|t| Utc.from_utc_datetime(&t))
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// `None` for an empty cell or the invalid sentinel.
fn parse_cell(text: &str) -> std::result::Result<Option<f64>, String> {
    if text.is_empty() {
        return Ok(None);
    }
    let v: f64 = text.parse().map_err(|_| format!("bad number `{text}`"))?;
    if v == INVALID_SENTINEL {
        return Ok(None);
    }
    if !v.is_finite() {
        return Err(format!("non-finite value `{text}`"));
    }
    Ok(Some(v))
}

fn record_line(record: &csv::StringRecord) -> usize {
    record.position().map(|p| p.line() as usize).unwrap_or(0)
}

fn csv_error(name: &str, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::parse(name, line, e.to_string())
}

pub fn load_observations(
    path: impl AsRef<Path>,
    pollutant: Pollutant,
) -> Result<BTreeMap<String, ObservationSeries>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_observations(file, &path.display().to_string(), pollutant)
}

/// Parses `station_id,timestamp_utc,value` rows into per-station series on
/// a contiguous hourly grid. Hours absent from the input are invalid.
pub fn read_observations<R: Read>(
    reader: R,
    name: &str,
    _pollutant: Pollutant,
) -> Result<BTreeMap<String, ObservationSeries>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(name, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header != ["station_id", "timestamp_utc", "value"] {
        return Err(Error::Schema(format!(
            "{name}: expected header `station_id,timestamp_utc,value`, found `{}`",
            header.join(",")
        )));
    }

    let mut raw: BTreeMap<String, BTreeMap<DateTime<Utc>, Option<f64>>> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(name, e))?;
        let line = record_line(&record);
        let station = record.get(0).unwrap_or("");
        if station.is_empty() {
            return Err(Error::parse(name, line, "empty station_id"));
        }
        let ts_text = record.get(1).unwrap_or("");
        let ts = parse_timestamp(ts_text)
            .ok_or_else(|| Error::parse(name, line, format!("bad timestamp `{ts_text}`")))?;
        if ts.minute() != 0 || ts.second() != 0 || ts.nanosecond() != 0 {
            return Err(Error::parse(
                name,
                line,
                format!("timestamp `{ts_text}` is not hour-aligned"),
            ));
        }
        let value = parse_cell(record.get(2).unwrap_or("")).map_err(|m| Error::parse(name, line, m))?;
        if let Some(v) = value {
            if v < 0.0 {
                return Err(Error::Validation(format!(
                    "{name}: line {line}: negative concentration {v} marked valid"
                )));
            }
        }
        if raw.entry(station.to_string()).or_default().insert(ts, value).is_some() {
            return Err(Error::Validation(format!(
                "{name}: line {line}: duplicate timestamp {ts_text} for station {station}"
            )));
        }
    }

    let mut out = BTreeMap::new();
    for (station_id, hours) in raw {
        let start = *hours.keys().next().expect("non-empty group");
        let end = *hours.keys().next_back().expect("non-empty group");
        let len = (end - start).num_hours() as usize + 1;
        let mut values = vec![0.0; len];
        let mut valid = vec![false; len];
        for (t, v) in hours {
            let i = (t - start).num_hours() as usize;
            if let Some(v) = v {
                values[i] = v;
                valid[i] = true;
            }
        }
        let series = ObservationSeries {
            station_id: station_id.clone(),
            start_time: start,
            values,
            valid,
        };
        series.validate()?;
        out.insert(station_id, series);
    }
    Ok(out)
}

pub fn write_observations<'a, W: Write>(
    series: impl IntoIterator<Item = &'a ObservationSeries>,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing observations: {e}"));
    w.write_record(["station_id", "timestamp_utc", "value"]).map_err(err)?;
    for s in series {
        for (i, (v, ok)) in s.values.iter().zip(&s.valid).enumerate() {
            let t = s.start_time + Duration::hours(i as i64);
            let cell = if *ok { v.to_string() } else { String::new() };
            w.write_record([s.station_id.as_str(), &format_timestamp(t), &cell])
                .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// File name convention for forecast files: `forecast_YYYY-MM-DD.csv`.
pub fn forecast_file_name(date: NaiveDate) -> String {
    format!("forecast_{}.csv", date.format("%Y-%m-%d"))
}

pub fn parse_forecast_file_name(name: &str) -> Option<NaiveDate> {
    let stem = name.strip_prefix("forecast_")?.strip_suffix(".csv")?;
    NaiveDate::parse_from_str(stem, "%Y-%m-%d").ok()
}

pub fn load_forecast_file(path: impl AsRef<Path>, pollutant: Pollutant) -> Result<ForecastFile> {
    let path = path.as_ref();
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    let date = parse_forecast_file_name(file_name).ok_or_else(|| {
        Error::Config(format!(
            "{}: forecast file name must look like forecast_YYYY-MM-DD.csv",
            path.display()
        ))
    })?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_forecast_file(file, &path.display().to_string(), date, pollutant)
}

/// Parses `station_id,hour_index,<variables>`. Stations with fewer than 48
/// rows get the absent hours marked invalid; a row with an empty or
/// sentinel cell is invalid as a whole.
pub fn read_forecast_file<R: Read>(
    reader: R,
    name: &str,
    issue_date: NaiveDate,
    pollutant: Pollutant,
) -> Result<ForecastFile> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_error(name, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.len() < 2 || header[0] != "station_id" || header[1] != "hour_index" {
        return Err(Error::Schema(format!(
            "{name}: header must start with station_id,hour_index"
        )));
    }
    let vars = pollutant.variables();
    let mut column_of = HashMap::new();
    for (col, h) in header.iter().enumerate().skip(2) {
        let Some(slot) = vars.iter().position(|v| v.column() == h) else {
            return Err(Error::Schema(format!(
                "{name}: unknown variable column `{h}` for {pollutant} mode"
            )));
        };
        if column_of.insert(slot, col).is_some() {
            return Err(Error::Schema(format!("{name}: duplicate column `{h}`")));
        }
    }
    if let Some(missing) = vars.iter().enumerate().find(|(i, _)| !column_of.contains_key(i)) {
        return Err(Error::Schema(format!(
            "{name}: missing variable column `{}`",
            missing.1.column()
        )));
    }

    let mut file = ForecastFile::new(issue_date, pollutant);
    let mut seen: BTreeSet<(String, usize)> = BTreeSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(name, e))?;
        let line = record_line(&record);
        let station = record.get(0).unwrap_or("");
        if station.is_empty() {
            return Err(Error::parse(name, line, "empty station_id"));
        }
        let hour_text = record.get(1).unwrap_or("");
        let hour: usize = hour_text
            .parse()
            .ok()
            .filter(|h| *h < FILE_HOURS)
            .ok_or_else(|| {
                Error::parse(name, line, format!("hour_index `{hour_text}` outside 0..=47"))
            })?;
        if !seen.insert((station.to_string(), hour)) {
            return Err(Error::parse(
                name,
                line,
                format!("duplicate hour {hour} for station {station}"),
            ));
        }
        let mut values = Vec::with_capacity(vars.len());
        let mut complete = true;
        for slot in 0..vars.len() {
            let cell = record.get(column_of[&slot]).unwrap_or("");
            match parse_cell(cell).map_err(|m| Error::parse(name, line, m))? {
                Some(v) => values.push(v),
                None => {
                    complete = false;
                    values.push(0.0);
                }
            }
        }
        let entry = file
            .stations
            .entry(station.to_string())
            .or_insert_with(|| StationForecast::empty(pollutant));
        if complete {
            let fv = FeatureVector(values);
            fv.validate(pollutant)
                .map_err(|e| Error::Validation(format!("{name}: line {line}: {e}")))?;
            entry.hours[hour] = fv;
            entry.valid[hour] = true;
        }
    }
    Ok(file)
}

/// Writes valid hours only; absent rows read back as invalid.
pub fn write_forecast_file<W: Write>(file: &ForecastFile, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing forecast file: {e}"));
    let vars = file.pollutant.variables();
    let mut header = vec!["station_id", "hour_index"];
    header.extend(vars.iter().map(|v| v.column()));
    w.write_record(&header).map_err(err)?;
    for (station, sf) in &file.stations {
        for (h, (fv, ok)) in sf.hours.iter().zip(&sf.valid).enumerate() {
            if !ok {
                continue;
            }
            let mut row = vec![station.clone(), h.to_string()];
            row.extend(fv.0.iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

/// Forecast files in `dir` matching the naming convention, sorted by date.
pub fn forecast_paths(dir: impl AsRef<Path>) -> Result<Vec<(NaiveDate, PathBuf)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name();
        if let Some(date) = name.to_str().and_then(parse_forecast_file_name) {
            out.push((date, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_forecast_dir(dir: impl AsRef<Path>, pollutant: Pollutant) -> Result<Vec<ForecastFile>> {
    forecast_paths(dir)?
        .par_iter()
        .map(|(_, p)| load_forecast_file(p, pollutant))
        .collect()
}

/// Restricts everything to stations present in the metadata, in the
/// observations and in every non-empty forecast file.
///
/// Forecast files with no rows at all are kept (they contribute no samples)
/// but do not shrink the intersection.
pub fn align(
    registry: &StationRegistry,
    observations: BTreeMap<String, ObservationSeries>,
    mut forecasts: Vec<ForecastFile>,
) -> Result<AlignedDataset> {
    let first = forecasts
        .first()
        .ok_or_else(|| Error::Alignment("no forecast files".into()))?;
    let pollutant = first.pollutant;
    if let Some(f) = forecasts.iter().find(|f| f.pollutant != pollutant) {
        return Err(Error::Alignment(format!(
            "forecast {} is {} but others are {pollutant}",
            f.issue_date, f.pollutant
        )));
    }
    forecasts.sort_by_key(|f| f.issue_date);
    if let Some(w) = forecasts.windows(2).find(|w| w[0].issue_date == w[1].issue_date) {
        return Err(Error::Alignment(format!(
            "duplicate forecast issue date {}",
            w[0].issue_date
        )));
    }

    let keep = |id: &str| {
        observations.contains_key(id)
            && forecasts
                .iter()
                .filter(|f| !f.stations.is_empty())
                .all(|f| f.stations.contains_key(id))
    };
    let mut reg = registry.retain(|s| keep(&s.station_id));
    if reg.is_empty() {
        return Err(Error::Alignment(
            "no station appears in metadata, observations and every forecast file".into(),
        ));
    }
    let ids: BTreeSet<String> = reg.ids().map(str::to_string).collect();
    let observations: BTreeMap<String, ObservationSeries> = observations
        .into_iter()
        .filter(|(k, _)| ids.contains(k))
        .collect();
    for f in &mut forecasts {
        f.stations.retain(|k, _| ids.contains(k));
    }
    for (id, series) in &observations {
        reg.set_missing_fraction(id, series.missing_fraction())?;
    }
    Ok(AlignedDataset {
        pollutant,
        registry: reg,
        observations,
        forecasts,
    })
}
