use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NeuralError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(NeuralError::Argument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Inverted dropout mask: each entry is 0 with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub(crate) fn sample_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout. Identity in eval mode or at rate 0.
pub fn apply_dropout<R: Rng + ?Sized>(
    values: &[f64],
    rate: f64,
    rng: &mut R,
    mode: Mode,
) -> Result<Vec<f64>> {
    check_rate(rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(values.to_vec());
    }
    let mask = sample_mask(values.len(), rate, rng);
    Ok(values.iter().zip(&mask).map(|(v, m)| v * m).collect())
}
