//! Holdout metrics comparing the raw forecast with the corrected output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use chrono::NaiveDate;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::error::{Error, Result};
use crate::series::{format_timestamp, AlignedDataset, Pollutant, FILE_HOURS};
use crate::trainer::{predict_hour, TriadModel};

pub const SPLIT_HOUR: usize = 15;
pub const FIRST_DAY_HOURS: usize = 24;

fn masked<'a>(
    pred: &'a [f64],
    obs: &'a [f64],
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + Clone + 'a> {
    if pred.len() != obs.len() || pred.len() != mask.len() {
        return Err(Error::Argument(format!(
            "series lengths differ: {} predictions, {} observations, {} mask entries",
            pred.len(),
            obs.len(),
            mask.len()
        )));
    }
    Ok(pred
        .iter()
        .zip(obs)
        .zip(mask)
        .filter(|(_, m)| **m)
        .map(|((p, o), _)| (*p, *o)))
}

pub fn rmse(pred: &[f64], obs: &[f64], mask: &[bool]) -> Result<f64> {
    let mut n = 0usize;
    let mut sq = 0.0;
    for (p, o) in masked(pred, obs, mask)? {
        sq += (p - o) * (p - o);
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("RMSE over zero valid hours".into()));
    }
    Ok((sq / n as f64).sqrt())
}

pub fn pearson(pred: &[f64], obs: &[f64], mask: &[bool]) -> Result<f64> {
    let pairs = masked(pred, obs, mask)?;
    let n = pairs.clone().count();
    if n < 2 {
        return Err(Error::UndefinedMetric(format!(
            "correlation needs at least 2 valid hours, got {n}"
        )));
    }
    let (sp, so) = pairs.clone().fold((0.0, 0.0), |(a, b), (p, o)| (a + p, b + o));
    let (mp, mo) = (sp / n as f64, so / n as f64);
    let (mut cov, mut vp, mut vo) = (0.0, 0.0, 0.0);
    for (p, o) in pairs {
        cov += (p - mp) * (o - mo);
        vp += (p - mp) * (p - mp);
        vo += (o - mo) * (o - mo);
    }
    if vp == 0.0 || vo == 0.0 {
        return Err(Error::UndefinedMetric("correlation of a constant series".into()));
    }
    Ok((cov / (vp.sqrt() * vo.sqrt())).clamp(-1.0, 1.0))
}

fn interval_max_delta(pred: &[f64], obs: &[f64], mask: &[bool]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for ((p, o), m) in pred.iter().zip(obs).zip(mask) {
        if !m {
            continue;
        }
        best = Some(match best {
            None => (*p, *o),
            Some((bp, bo)) => (bp.max(*p), bo.max(*o)),
        });
    }
    best.map(|(p, o)| p - o)
}

/// `(max pred - max obs)` over hours `[0, split)` and `[split, len)`.
/// An interval without valid hours yields `None`.
pub fn max_concentration_delta(
    pred: &[f64],
    obs: &[f64],
    mask: &[bool],
    split_hour: usize,
) -> Result<(Option<f64>, Option<f64>)> {
    let _ = masked(pred, obs, mask)?;
    let s = split_hour.min(pred.len());
    Ok((
        interval_max_delta(&pred[..s], &obs[..s], &mask[..s]),
        interval_max_delta(&pred[s..], &obs[s..], &mask[s..]),
    ))
}

/// One evaluated (station, file, hour).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub station_id: String,
    pub issue_date: NaiveDate,
    pub hour_index: usize,
    pub observation: Option<f64>,
    pub forecast: Option<f64>,
    pub corrected: Option<f64>,
}

impl PredictionRow {
    /// Hours with an observation, a forecast and a correction. Both baseline
    /// and corrected metrics use exactly these hours.
    pub fn evaluable(&self) -> bool {
        self.observation.is_some() && self.forecast.is_some() && self.corrected.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Paired {
    pub forecast: Option<f64>,
    pub corrected: Option<f64>,
}

impl Paired {
    pub fn delta(&self) -> Option<f64> {
        Some(self.forecast? - self.corrected?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScopeMetrics {
    pub forecast_rmse: f64,
    pub corrected_rmse: f64,
    /// `forecast_rmse - corrected_rmse`.
    pub reduction: f64,
    pub first24_rmse: Paired,
    pub pearson: Paired,
    /// Mean over station-days of the first-15-hour maximum delta.
    pub max_delta_first15: Paired,
    /// Mean over station-days of the final-33-hour maximum delta.
    pub max_delta_final33: Paired,
    pub evaluated_hours: usize,
    pub skipped_hours: usize,
}

impl ScopeMetrics {
    pub fn relative_reduction(&self) -> f64 {
        self.reduction / self.forecast_rmse
    }

    fn rows(&self) -> [(&'static str, Paired); 5] {
        [
            (
                "rmse",
                Paired {
                    forecast: Some(self.forecast_rmse),
                    corrected: Some(self.corrected_rmse),
                },
            ),
            ("first24_rmse", self.first24_rmse),
            ("pearson", self.pearson),
            ("max_delta_first15", self.max_delta_first15),
            ("max_delta_final33", self.max_delta_final33),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pollutant: Pollutant,
    pub aggregate: ScopeMetrics,
    pub stations: BTreeMap<String, ScopeMetrics>,
    /// Stations evaluated without success, with the reason.
    pub skipped_stations: BTreeMap<String, String>,
    pub evaluated_hours: usize,
    pub skipped_hours: usize,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn scope_metrics(rows: &[&PredictionRow]) -> Result<ScopeMetrics> {
    let take = |rows: &mut dyn Iterator<Item = &&PredictionRow>| {
        let mut f = Vec::new();
        let mut c = Vec::new();
        let mut o = Vec::new();
        for r in rows.filter(|r| r.evaluable()) {
            f.push(r.forecast.unwrap());
            c.push(r.corrected.unwrap());
            o.push(r.observation.unwrap());
        }
        (f, c, o)
    };
    let (f, c, o) = take(&mut rows.iter());
    let all = vec![true; f.len()];
    let forecast_rmse = rmse(&f, &o, &all)?;
    let corrected_rmse = rmse(&c, &o, &all)?;

    let (f24, c24, o24) = take(&mut rows.iter().filter(|r| r.hour_index < FIRST_DAY_HOURS));
    let m24 = vec![true; f24.len()];
    let first24_rmse = Paired {
        forecast: rmse(&f24, &o24, &m24).ok(),
        corrected: rmse(&c24, &o24, &m24).ok(),
    };
    let pearson = Paired {
        forecast: pearson(&f, &o, &all).ok(),
        corrected: pearson(&c, &o, &all).ok(),
    };

    let mut days: BTreeMap<(&str, NaiveDate), Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        days.entry((&r.station_id, r.issue_date)).or_default().push(r);
    }
    let mut d_first = (Vec::new(), Vec::new());
    let mut d_final = (Vec::new(), Vec::new());
    for day in days.values() {
        let mut fc = vec![0.0; FILE_HOURS];
        let mut co = vec![0.0; FILE_HOURS];
        let mut ob = vec![0.0; FILE_HOURS];
        let mut mask = vec![false; FILE_HOURS];
        for r in day.iter().filter(|r| r.evaluable() && r.hour_index < FILE_HOURS) {
            fc[r.hour_index] = r.forecast.unwrap();
            co[r.hour_index] = r.corrected.unwrap();
            ob[r.hour_index] = r.observation.unwrap();
            mask[r.hour_index] = true;
        }
        let (ff, fl) = max_concentration_delta(&fc, &ob, &mask, SPLIT_HOUR)?;
        let (cf, cl) = max_concentration_delta(&co, &ob, &mask, SPLIT_HOUR)?;
        if let (Some(a), Some(b)) = (ff, cf) {
            d_first.0.push(a);
            d_first.1.push(b);
        }
        if let (Some(a), Some(b)) = (fl, cl) {
            d_final.0.push(a);
            d_final.1.push(b);
        }
    }
    Ok(ScopeMetrics {
        forecast_rmse,
        corrected_rmse,
        reduction: forecast_rmse - corrected_rmse,
        first24_rmse,
        pearson,
        max_delta_first15: Paired {
            forecast: mean(&d_first.0),
            corrected: mean(&d_first.1),
        },
        max_delta_final33: Paired {
            forecast: mean(&d_final.0),
            corrected: mean(&d_final.1),
        },
        evaluated_hours: f.len(),
        skipped_hours: rows.len() - f.len(),
    })
}

/// Assemble a report from prediction rows. Aggregate metrics pool every
/// evaluable (station, hour) pair.
pub fn report_from_predictions(
    pollutant: Pollutant,
    rows: &[PredictionRow],
    mut skipped_stations: BTreeMap<String, String>,
) -> Result<EvalReport> {
    let all: Vec<&PredictionRow> = rows.iter().collect();
    if !all.iter().any(|r| r.evaluable()) {
        return Err(Error::Data("no evaluable holdout hours".into()));
    }
    let aggregate = scope_metrics(&all)?;
    let mut by_station: BTreeMap<&str, Vec<&PredictionRow>> = BTreeMap::new();
    for r in rows {
        by_station.entry(&r.station_id).or_default().push(r);
    }
    let mut stations = BTreeMap::new();
    for (id, rs) in by_station {
        match scope_metrics(&rs) {
            Ok(m) => {
                stations.insert(id.to_string(), m);
            }
            Err(Error::UndefinedMetric(msg)) => {
                skipped_stations.entry(id.to_string()).or_insert(msg);
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        pollutant,
        evaluated_hours: aggregate.evaluated_hours,
        skipped_hours: aggregate.skipped_hours,
        aggregate,
        stations,
        skipped_stations,
    })
}

/// Predict every hour of every holdout file for every aligned station.
pub fn predict_holdout(
    models: &BTreeMap<usize, TriadModel>,
    clustering: &Clustering,
    dataset: &AlignedDataset,
    holdout: &[NaiveDate],
) -> Result<(Vec<PredictionRow>, BTreeMap<String, String>)> {
    let p = dataset.pollutant;
    let conc = p.concentration_variable();
    let mut skipped = BTreeMap::new();
    let mut jobs = Vec::new();
    let dates: BTreeSet<NaiveDate> = holdout.iter().copied().collect();
    for date in &dates {
        let file = dataset
            .forecast(*date)
            .ok_or_else(|| Error::Config(format!("holdout date {date} has no forecast file")))?;
        for station in file.stations.keys() {
            let model = clustering.cluster_of(station).and_then(|c| models.get(&c));
            if model.is_none() {
                let reason = match clustering.cluster_of(station) {
                    None => "station has no cluster assignment".to_string(),
                    Some(c) => format!("cluster {c} has no model"),
                };
                skipped.entry(station.clone()).or_insert_with(|| {
                    warn!("skipping {station}: {reason}");
                    reason
                });
            }
            jobs.push((file, station.as_str(), model));
        }
    }
    let rows: Vec<Result<Vec<PredictionRow>>> = jobs
        .par_iter()
        .map(|(file, station, model)| {
            let sf = &file.stations[*station];
            let obs = dataset.observations.get(*station);
            (0..FILE_HOURS)
                .map(|h| {
                    let corrected = match model {
                        Some(m) => predict_hour(m, file, station, h)?,
                        None => None,
                    };
                    Ok(PredictionRow {
                        station_id: station.to_string(),
                        issue_date: file.issue_date,
                        hour_index: h,
                        observation: obs.and_then(|o| o.at(file.hour_time(h))),
                        forecast: sf.valid[h].then(|| sf.hours[h].get(p, conc)).flatten(),
                        corrected,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(jobs.len() * FILE_HOURS);
    for r in rows {
        out.extend(r?);
    }
    Ok((out, skipped))
}

pub fn evaluate(
    models: &BTreeMap<usize, TriadModel>,
    clustering: &Clustering,
    dataset: &AlignedDataset,
    holdout: &[NaiveDate],
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    if holdout.is_empty() {
        return Err(Error::Data("empty holdout date list".into()));
    }
    let (rows, skipped) = predict_holdout(models, clustering, dataset, holdout)?;
    let report = report_from_predictions(dataset.pollutant, &rows, skipped)?;
    Ok((report, rows))
}

/// Round to 4 decimals and drop trailing zeros.
pub fn format_decimal(x: f64) -> String {
    let s = format!("{x:.4}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `scope,metric,forecast_value,corrected_value,delta` with full precision
/// values; `delta` is computed from the stored values.
pub fn write_report_csv<W: Write>(report: &EvalReport, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing report: {e}"));
    w.write_record(["scope", "metric", "forecast_value", "corrected_value", "delta"])
        .map_err(err)?;
    let scopes = std::iter::once(("aggregate", &report.aggregate))
        .chain(report.stations.iter().map(|(k, v)| (k.as_str(), v)));
    for (scope, m) in scopes {
        for (metric, pair) in m.rows() {
            w.write_record([
                scope.to_string(),
                metric.to_string(),
                opt_cell(pair.forecast),
                opt_cell(pair.corrected),
                opt_cell(pair.delta()),
            ])
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

fn cell4(v: Option<f64>) -> String {
    v.map(format_decimal).unwrap_or_else(|| "-".into())
}

/// Plain-text summary table.
pub fn render_tables(report: &EvalReport, label: &str) -> String {
    let a = &report.aggregate;
    let mut s = String::new();
    let _ = writeln!(s, "pollutant: {}", report.pollutant);
    let _ = writeln!(
        s,
        "evaluated hours: {}  skipped hours: {}",
        report.evaluated_hours, report.skipped_hours
    );
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "{:<24} {:>14} {:>14} {:>10} {:>10}",
        "model", "forecast_rmse", "corrected_rmse", "reduction", "relative"
    );
    let _ = writeln!(
        s,
        "{:<24} {:>14} {:>14} {:>10} {:>10}",
        label,
        format_decimal(a.forecast_rmse),
        format_decimal(a.corrected_rmse),
        format_decimal(a.reduction),
        format!("{:.1}%", 100.0 * a.relative_reduction())
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "relative reduction: {}", format_decimal(a.relative_reduction()));
    let _ = writeln!(s);
    let _ = writeln!(s, "{:<20} {:>12} {:>12} {:>12}", "metric", "forecast", "corrected", "delta");
    for (metric, pair) in a.rows() {
        let _ = writeln!(
            s,
            "{:<20} {:>12} {:>12} {:>12}",
            metric,
            cell4(pair.forecast),
            cell4(pair.corrected),
            cell4(pair.delta())
        );
    }
    if !report.skipped_stations.is_empty() {
        let _ = writeln!(s);
        let _ = writeln!(s, "skipped stations:");
        for (id, why) in &report.skipped_stations {
            let _ = writeln!(s, "  {id}: {why}");
        }
    }
    s
}

pub const PREDICTION_HEADER: [&str; 7] = [
    "station_id",
    "issue_date",
    "hour_index",
    "valid_time",
    "observation",
    "forecast",
    "corrected",
];

pub fn write_predictions<W: Write>(rows: &[PredictionRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::Data(format!("writing predictions: {e}"));
    w.write_record(PREDICTION_HEADER).map_err(err)?;
    for r in rows {
        let t = crate::series::issue_start(r.issue_date) + chrono::Duration::hours(r.hour_index as i64);
        w.write_record([
            r.station_id.clone(),
            r.issue_date.to_string(),
            r.hour_index.to_string(),
            format_timestamp(t),
            opt_cell(r.observation),
            opt_cell(r.forecast),
            opt_cell(r.corrected),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

pub fn read_predictions<R: Read>(reader: R, name: &str) -> Result<Vec<PredictionRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(name, 1, e.to_string()))?
        .clone();
    let col = |c: &str| {
        headers
            .iter()
            .position(|h| h == c)
            .ok_or_else(|| Error::Schema(format!("{name}: missing column `{c}`")))
    };
    let (ci, cd, ch) = (col("station_id")?, col("issue_date")?, col("hour_index")?);
    let (co, cf, cc) = (col("observation")?, col("forecast")?, col("corrected")?);
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::parse(name, row, e.to_string()))?;
        let num = |k: usize| -> Result<Option<f64>> {
            let t = rec.get(k).unwrap_or("");
            if t.is_empty() {
                return Ok(None);
            }
            t.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::parse(name, row, format!("`{t}`: {e}")))
        };
        out.push(PredictionRow {
            station_id: rec.get(ci).unwrap_or("").to_string(),
            issue_date: NaiveDate::parse_from_str(rec.get(cd).unwrap_or(""), "%Y-%m-%d")
                .map_err(|e| Error::parse(name, row, e.to_string()))?,
            hour_index: rec
                .get(ch)
                .unwrap_or("")
                .parse()
                .map_err(|e| Error::parse(name, row, format!("hour_index: {e}")))?,
            observation: num(co)?,
            forecast: num(cf)?,
            corrected: num(cc)?,
        });
    }
    Ok(out)
}

/// SVG line chart of observation, forecast and corrected series for one
/// station-day. Missing points break the line.
pub fn render_svg(rows: &[PredictionRow], title: &str) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let values: Vec<f64> = rows
        .iter()
        .flat_map(|r| [r.observation, r.forecast, r.corrected])
        .flatten()
        .collect();
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let x = |hour: usize| pad + (w - 2.0 * pad) * hour as f64 / (FILE_HOURS - 1) as f64;
    let y = |v: f64| h - pad - (h - 2.0 * pad) * (v - lo) / (hi - lo);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{pad}" y="20" font-size="14">{title}</text>"#);
    let series: [(&str, &str, fn(&PredictionRow) -> Option<f64>); 3] = [
        ("observation", "black", |r| r.observation),
        ("forecast", "red", |r| r.forecast),
        ("corrected", "blue", |r| r.corrected),
    ];
    for (k, (name, color, get)) in series.iter().enumerate() {
        let mut segment: Vec<String> = Vec::new();
        let flush = |seg: &mut Vec<String>, s: &mut String| {
            if seg.len() > 1 {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            seg.clear();
        };
        for r in rows {
            match get(r) {
                Some(v) => segment.push(format!("{:.1},{:.1}", x(r.hour_index), y(v))),
                None => flush(&mut segment, &mut s),
            }
        }
        flush(&mut segment, &mut s);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{name}</text>"#,
            w - 120.0,
            40.0 + 16.0 * k as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(station: &str, day: u32, hour: usize, o: f64, f: f64, c: f64) -> PredictionRow {
        PredictionRow {
            station_id: station.into(),
            issue_date: NaiveDate::from_ymd_opt(2019, 7, day).unwrap(),
            hour_index: hour,
            observation: Some(o),
            forecast: Some(f),
            corrected: Some(c),
        }
    }

    #[test]
    fn rmse_basics() {
        let o = [1.0, 2.0, 3.0];
        let m = [true; 3];
        assert_eq!(rmse(&o, &o, &m).unwrap(), 0.0);
        let p: Vec<f64> = o.iter().map(|v| v + 2.0).collect();
        assert_eq!(rmse(&p, &o, &m).unwrap(), 2.0);
        assert!(matches!(rmse(&p, &o, &[false; 3]), Err(Error::UndefinedMetric(_))));
        assert!(rmse(&p, &o, &[true; 2]).is_err());
    }

    #[test]
    fn pearson_basics() {
        let p = [1.0, 2.0, 4.0, 7.0];
        let m = [true; 4];
        let o: Vec<f64> = p.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pearson(&p, &o, &m).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = p.iter().map(|v| -v).collect();
        assert!((pearson(&p, &neg, &m).unwrap() + 1.0).abs() < 1e-12);
        assert!(pearson(&p, &[3.0; 4], &m).is_err());
    }

    #[test]
    fn max_delta_basics() {
        let o: Vec<f64> = (0..48).map(|h| (h as f64 * 0.3).sin() * 10.0).collect();
        let m = vec![true; 48];
        assert_eq!(max_concentration_delta(&o, &o, &m, 15).unwrap(), (Some(0.0), Some(0.0)));
        let p: Vec<f64> = o.iter().map(|v| v + 5.0).collect();
        let (a, b) = max_concentration_delta(&p, &o, &m, 15).unwrap();
        assert!((a.unwrap() - 5.0).abs() < 1e-12 && (b.unwrap() - 5.0).abs() < 1e-12);
        let mut m2 = m.clone();
        m2[..15].iter_mut().for_each(|v| *v = false);
        assert_eq!(max_concentration_delta(&p, &o, &m2, 15).unwrap().0, None);
    }

    #[test]
    fn decimal_formatting() {
        assert_eq!(format_decimal(3.604), "3.604");
        assert_eq!(format_decimal(3.60400001), "3.604");
        assert_eq!(format_decimal(3.12724), "3.1272");
        assert_eq!(format_decimal(2.0), "2");
        assert_eq!(format_decimal(-0.00001), "0");
    }

    #[test]
    fn self_comparison_has_zero_reduction() {
        let rows: Vec<PredictionRow> =
            (0..48).map(|h| row("A", 1, h, h as f64, h as f64 + 1.0, h as f64 + 1.0)).collect();
        let rep = report_from_predictions(Pollutant::Ozone, &rows, BTreeMap::new()).unwrap();
        assert_eq!(rep.aggregate.reduction, 0.0);
        assert_eq!(rep.stations["A"].reduction, 0.0);
    }

    #[test]
    fn aggregate_pools_hours() {
        // station A: 1 hour off by 3; station B: 3 hours off by 1
        let mut rows = vec![row("A", 1, 0, 0.0, 3.0, 0.0)];
        for h in 0..3 {
            rows.push(row("B", 1, h, 0.0, 1.0, 0.0));
        }
        let rep = report_from_predictions(Pollutant::Ozone, &rows, BTreeMap::new()).unwrap();
        let pooled = ((9.0 + 3.0) / 4.0f64).sqrt();
        assert!((rep.aggregate.forecast_rmse - pooled).abs() < 1e-12);
        let averaged = (3.0 + 1.0) / 2.0;
        assert!((rep.aggregate.forecast_rmse - averaged).abs() > 0.1);
    }

    #[test]
    fn skipped_hours_are_counted() {
        let mut rows: Vec<PredictionRow> =
            (0..48).map(|h| row("A", 1, h, 1.0, 2.0, 1.5)).collect();
        rows[3].corrected = None;
        rows[4].observation = None;
        let rep = report_from_predictions(Pollutant::Ozone, &rows, BTreeMap::new()).unwrap();
        assert_eq!(rep.evaluated_hours, 46);
        assert_eq!(rep.skipped_hours, 2);
        assert_eq!(rep.evaluated_hours + rep.skipped_hours, 48);
    }

    #[test]
    fn no_evaluable_hours_is_data_error() {
        let mut r = row("A", 1, 0, 1.0, 2.0, 1.5);
        r.observation = None;
        assert!(matches!(
            report_from_predictions(Pollutant::Ozone, &[r], BTreeMap::new()),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn report_csv_delta_is_exact() {
        let rows: Vec<PredictionRow> = (0..48)
            .map(|h| row("A", 1, h, 0.1 * h as f64, 0.37 * h as f64, 0.2 * h as f64))
            .collect();
        let rep = report_from_predictions(Pollutant::Ozone, &rows, BTreeMap::new()).unwrap();
        let mut buf = Vec::new();
        write_report_csv(&rep, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        for rec in rdr.records() {
            let rec = rec.unwrap();
            if rec[2].is_empty() || rec[3].is_empty() {
                continue;
            }
            let f: f64 = rec[2].parse().unwrap();
            let c: f64 = rec[3].parse().unwrap();
            let d: f64 = rec[4].parse().unwrap();
            assert_eq!(d.to_bits(), (f - c).to_bits());
        }
    }

    #[test]
    fn predictions_round_trip() {
        let mut rows: Vec<PredictionRow> =
            (0..4).map(|h| row("A", 2, h, 1.25, 2.5, 1.0 / 3.0)).collect();
        rows[1].corrected = None;
        let mut buf = Vec::new();
        write_predictions(&rows, &mut buf).unwrap();
        assert_eq!(read_predictions(buf.as_slice(), "p").unwrap(), rows);
    }

    #[test]
    fn svg_has_three_series() {
        let rows: Vec<PredictionRow> =
            (0..48).map(|h| row("A", 1, h, h as f64, 1.0 + h as f64, 0.5 + h as f64)).collect();
        let svg = render_svg(&rows, "A 2019-07-01");
        assert_eq!(svg.matches("<polyline").count(), 3);
    }
}
