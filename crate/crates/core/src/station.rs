//! Station metadata: identity and the geographic features used for
//! clustering.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STATION_HEADER: [&str; 5] = ["station_id", "latitude", "longitude", "elevation", "ruca"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Station {
    pub station_id: String,
    pub latitude: f64,
    pub longitude: f64,
    /// Meters above sea level.
    pub elevation: Option<f64>,
    /// Rural-urban commuting area code, 1..=10.
    pub ruca: Option<u8>,
    /// Fraction of observation hours that are invalid.
    pub missing_fraction: f64,
}

impl Station {
    pub fn new(station_id: impl Into<String>, latitude: f64, longitude: f64) -> Self {
        Self {
            station_id: station_id.into(),
            latitude,
            longitude,
            elevation: None,
            ruca: None,
            missing_fraction: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.station_id.is_empty() {
            return Err(Error::Validation("empty station_id".into()));
        }
        if !(-90.0..=90.0).contains(&self.latitude) {
            return Err(Error::Validation(format!(
                "station {}: latitude {} outside [-90, 90]",
                self.station_id, self.latitude
            )));
        }
        if !(-180.0..=180.0).contains(&self.longitude) {
            return Err(Error::Validation(format!(
                "station {}: longitude {} outside [-180, 180]",
                self.station_id, self.longitude
            )));
        }
        if let Some(e) = self.elevation {
            if !e.is_finite() {
                return Err(Error::Validation(format!(
                    "station {}: non-finite elevation",
                    self.station_id
                )));
            }
        }
        if let Some(r) = self.ruca {
            if !(1..=10).contains(&r) {
                return Err(Error::Validation(format!(
                    "station {}: ruca {r} outside 1..=10",
                    self.station_id
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.missing_fraction) {
            return Err(Error::Validation(format!(
                "station {}: missing_fraction {} outside [0, 1]",
                self.station_id, self.missing_fraction
            )));
        }
        Ok(())
    }

    pub fn has(&self, feature: Feature) -> bool {
        match feature {
            Feature::LatLon => true,
            Feature::Elevation => self.elevation.is_some(),
            Feature::Urbanization => self.ruca.is_some(),
        }
    }
}

/// Stations in insertion order with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StationRegistry {
    stations: Vec<Station>,
}

impl StationRegistry {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        let mut seen = HashSet::new();
        for s in &stations {
            s.validate()?;
            if !seen.insert(s.station_id.as_str()) {
                return Err(Error::Validation(format!(
                    "duplicate station_id {}",
                    s.station_id
                )));
            }
        }
        Ok(Self { stations })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn get(&self, station_id: &str) -> Option<&Station> {
        self.stations.iter().find(|s| s.station_id == station_id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.stations.iter().map(|s| s.station_id.as_str())
    }

    /// Keeps stations for which `keep` holds, preserving order.
    pub fn retain(&self, mut keep: impl FnMut(&Station) -> bool) -> Self {
        Self {
            stations: self.stations.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }

    /// Writes back per-station missing fractions computed elsewhere.
    pub fn set_missing_fraction(&mut self, station_id: &str, fraction: f64) -> Result<()> {
        let station = self
            .stations
            .iter_mut()
            .find(|s| s.station_id == station_id)
            .ok_or_else(|| Error::Argument(format!("unknown station {station_id}")))?;
        if !(0.0..=1.0).contains(&fraction) {
            return Err(Error::Validation(format!(
                "missing fraction {fraction} outside [0, 1]"
            )));
        }
        station.missing_fraction = fraction;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    LatLon,
    Elevation,
    Urbanization,
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Feature::LatLon => "lat_lon",
            Feature::Elevation => "elevation",
            Feature::Urbanization => "urbanization",
        })
    }
}

impl FromStr for Feature {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "lat_lon" => Ok(Feature::LatLon),
            "elevation" => Ok(Feature::Elevation),
            "urbanization" | "ruca" => Ok(Feature::Urbanization),
            other => Err(Error::Config(format!("unknown clustering feature `{other}`"))),
        }
    }
}

/// Which station features feed clustering. Always includes latitude and
/// longitude.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Feature>", into = "Vec<Feature>")]
pub struct FeatureSelection {
    pub elevation: bool,
    pub urbanization: bool,
}

impl FeatureSelection {
    pub const LAT_LON: Self = Self {
        elevation: false,
        urbanization: false,
    };

    pub fn new(features: &[Feature]) -> Result<Self> {
        if !features.contains(&Feature::LatLon) {
            return Err(Error::Argument(
                "feature selection must include lat_lon".into(),
            ));
        }
        Ok(Self {
            elevation: features.contains(&Feature::Elevation),
            urbanization: features.contains(&Feature::Urbanization),
        })
    }

    pub fn features(&self) -> Vec<Feature> {
        let mut out = vec![Feature::LatLon];
        if self.elevation {
            out.push(Feature::Elevation);
        }
        if self.urbanization {
            out.push(Feature::Urbanization);
        }
        out
    }

    /// Column names of the feature matrix, in order.
    pub fn columns(&self) -> Vec<&'static str> {
        let mut out = vec!["latitude", "longitude"];
        if self.elevation {
            out.push("elevation");
        }
        if self.urbanization {
            out.push("ruca");
        }
        out
    }
}

impl TryFrom<Vec<Feature>> for FeatureSelection {
    type Error = Error;

    fn try_from(v: Vec<Feature>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<FeatureSelection> for Vec<Feature> {
    fn from(s: FeatureSelection) -> Self {
        s.features()
    }
}

impl FromStr for FeatureSelection {
    type Err = Error;

    /// Comma-separated list, e.g. `lat_lon,elevation`.
    fn from_str(s: &str) -> Result<Self> {
        let features = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Feature::from_str)
            .collect::<Result<Vec<_>>>()?;
        Self::new(&features)
    }
}

impl fmt::Display for FeatureSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<String> = self.features().iter().map(|x| x.to_string()).collect();
        f.write_str(&names.join(","))
    }
}

/// Stations possessing every selected feature, in input order.
pub fn filter_for_clustering(
    registry: &StationRegistry,
    features: &[Feature],
) -> Result<StationRegistry> {
    let selection = FeatureSelection::new(features)?;
    Ok(filter_by_selection(registry, selection))
}

pub fn filter_by_selection(registry: &StationRegistry, selection: FeatureSelection) -> StationRegistry {
    let wanted = selection.features();
    registry.retain(|s| wanted.iter().all(|f| s.has(*f)))
}

pub fn load_station_metadata(path: impl AsRef<Path>) -> Result<StationRegistry> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_station_metadata(file, &path.display().to_string())
}

pub fn read_station_metadata<R: Read>(reader: R, name: &str) -> Result<StationRegistry> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(name, 1, e.to_string()))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != STATION_HEADER {
        return Err(Error::Schema(format!(
            "{name}: expected header `{}`, found `{}`",
            STATION_HEADER.join(","),
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut stations = Vec::new();
    let mut seen = HashSet::new();
    for record in rdr.records() {
        let record = record.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            Error::parse(name, line, e.to_string())
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |i: usize| record.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i)
                .parse::<f64>()
                .map_err(|_| Error::parse(name, line, format!("bad {} `{}`", STATION_HEADER[i], field(i))))
        };
        let station_id = field(0).to_string();
        if station_id.is_empty() {
            return Err(Error::parse(name, line, "empty station_id"));
        }
        let elevation = if field(3).is_empty() { None } else { Some(num(3)?) };
        let ruca = if field(4).is_empty() {
            None
        } else {
            let v = num(4)?;
            if v.fract() != 0.0 || !(1.0..=10.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "{name}: line {line}: ruca `{}` is not an integer in 1..=10",
                    field(4)
                )));
            }
            Some(v as u8)
        };
        let station = Station {
            station_id,
            latitude: num(1)?,
            longitude: num(2)?,
            elevation,
            ruca,
            missing_fraction: 0.0,
        };
        station
            .validate()
            .map_err(|e| Error::Validation(format!("{name}: line {line}: {e}")))?;
        if !seen.insert(station.station_id.clone()) {
            return Err(Error::Validation(format!(
                "{name}: line {line}: duplicate station_id {}",
                station.station_id
            )));
        }
        stations.push(station);
    }
    StationRegistry::new(stations)
}

pub fn write_station_metadata<W: Write>(registry: &StationRegistry, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Data(format!("writing station metadata: {e}"));
    w.write_record(STATION_HEADER).map_err(csv_err)?;
    for s in registry.stations() {
        w.write_record([
            s.station_id.clone(),
            s.latitude.to_string(),
            s.longitude.to_string(),
            s.elevation.map(|v| v.to_string()).unwrap_or_default(),
            s.ruca.map(|v| v.to_string()).unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}
