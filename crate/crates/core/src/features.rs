//! Network input encoding of forecast feature vectors.
//!
//! Cyclic variables become a (sin, cos) pair in place so that 359 degrees
//! sits next to 0 degrees. Everything else passes through unchanged.

use std::f64::consts::TAU;

use crate::series::{FeatureVector, Pollutant};

/// Width of the encoded vector: 11 for ozone, 8 for PM2.5.
pub fn encoded_dim(pollutant: Pollutant) -> usize {
    pollutant
        .variables()
        .iter()
        .map(|v| if v.period().is_some() { 2 } else { 1 })
        .sum()
}

pub fn encoded_names(pollutant: Pollutant) -> Vec<String> {
    let mut names = Vec::with_capacity(encoded_dim(pollutant));
    for v in pollutant.variables() {
        if v.period().is_some() {
            names.push(format!("{}_sin", v.column()));
            names.push(format!("{}_cos", v.column()));
        } else {
            names.push(v.column().to_string());
        }
    }
    names
}

/// Append the encoding of one hour to `out`.
pub fn encode_into(pollutant: Pollutant, fv: &FeatureVector, out: &mut Vec<f64>) {
    for (v, x) in pollutant.variables().iter().zip(&fv.0) {
        match v.period() {
            Some(period) => {
                let angle = TAU * x / period;
                out.push(angle.sin());
                out.push(angle.cos());
            }
            None => out.push(*x),
        }
    }
}

pub fn encode(pollutant: Pollutant, fv: &FeatureVector) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_dim(pollutant));
    encode_into(pollutant, fv, &mut out);
    out
}

/// Flattened encoding of a window, optionally in reverse hour order.
pub fn encode_window(pollutant: Pollutant, window: &[FeatureVector], reversed: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(window.len() * encoded_dim(pollutant));
    if reversed {
        window.iter().rev().for_each(|fv| encode_into(pollutant, fv, &mut out));
    } else {
        window.iter().for_each(|fv| encode_into(pollutant, fv, &mut out));
    }
    out
}

/// Position of the forecast concentration inside an encoded vector.
pub fn concentration_slot(pollutant: Pollutant) -> usize {
    let target = pollutant.concentration_variable();
    let mut slot = 0;
    for v in pollutant.variables() {
        if *v == target {
            return slot;
        }
        slot += if v.period().is_some() { 2 } else { 1 };
    }
    unreachable!("concentration variable is always listed")
}
