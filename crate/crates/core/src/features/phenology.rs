// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sits::TimeSeries;

/// Amplitudes below this count as a flat series.
pub const FLAT_EPSILON: f64 = 1e-6;

/// Metrics exported as feature columns, in order.
pub const PHENOLOGY_COLUMNS: [&str; 7] =
    ["sos_day", "pos_day", "eos_day", "integral", "integral_above_base", "max_derivative", "min_derivative"];

/// Season markers are zero-based days of the year of the first sample,
/// fractional where they come from an interpolated crossing. They are `None`
/// for a flat series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhenologyMetrics {
    pub sos_day: Option<f64>,
    pub pos_day: Option<f64>,
    pub eos_day: Option<f64>,
    pub amplitude: f64,
    /// Area under the curve (index · days); biomass indicator.
    pub integral: f64,
    /// Area above the curve minimum; yield indicator.
    pub integral_above_base: f64,
    pub max_derivative: f64,
    pub min_derivative: f64,
}

impl PhenologyMetrics {
    pub fn column_values(&self) -> [Option<f64>; 7] {
        [
            self.sos_day,
            self.pos_day,
            self.eos_day,
            Some(self.integral),
            Some(self.integral_above_base),
            Some(self.max_derivative),
            Some(self.min_derivative),
        ]
    }
}

/// Metrics of the valid samples of `ts` (linear between samples).
pub fn phenology(ts: &TimeSeries, amplitude_fraction: f64) -> Result<PhenologyMetrics> {
    if !(0.0..=1.0).contains(&amplitude_fraction) {
        return Err(Error::InvalidArgument("amplitude fraction must lie in [0, 1]".into()));
    }
    let pts = ts.valid_points();
    if pts.len() < 4 {
        return Err(Error::InsufficientPoints { need: 4, have: pts.len() });
    }
    let year0 = pts[0].0.first_of_year();
    let x: Vec<f64> = pts.iter().map(|p| (p.0 .0 - year0.0) as f64).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();

    let mut pos = 0;
    for i in 1..y.len() {
        if y[i] > y[pos] {
            pos = i;
        }
    }
    let base = y.iter().copied().fold(f64::INFINITY, f64::min);
    let amplitude = y[pos] - base;

    let mut integral = 0.0;
    let mut above = 0.0;
    let mut dmax = f64::NEG_INFINITY;
    let mut dmin = f64::INFINITY;
    for i in 1..x.len() {
        let dx = x[i] - x[i - 1];
        integral += 0.5 * dx * (y[i] + y[i - 1]);
        above += 0.5 * dx * ((y[i] - base) + (y[i - 1] - base));
        let d = (y[i] - y[i - 1]) / dx;
        dmax = dmax.max(d);
        dmin = dmin.min(d);
    }

    let (sos, pos_day, eos) = if amplitude < FLAT_EPSILON {
        (None, None, None)
    } else {
        let level = base + amplitude_fraction * amplitude;
        let cross = |i: usize| {
            let (x0, x1, y0, y1) = (x[i - 1], x[i], y[i - 1], y[i]);
            if y1 == y0 {
                x0
            } else {
                x0 + (level - y0) / (y1 - y0) * (x1 - x0)
            }
        };
        let sos = if y[0] >= level { x[0] } else { (1..=pos).find(|&i| y[i] >= level).map(cross).unwrap_or(x[pos]) };
        let last = y.len() - 1;
        let eos = if y[last] >= level { x[last] } else { (pos + 1..=last).rev().find(|&i| y[i - 1] >= level).map(cross).unwrap_or(x[pos]) };
        (Some(sos), Some(x[pos]), Some(eos))
    };
    Ok(PhenologyMetrics {
        sos_day: sos,
        pos_day,
        eos_day: eos,
        amplitude,
        integral,
        integral_above_base: above,
        max_derivative: dmax,
        min_derivative: dmin,
    })
}
