// SPDX-License-Identifier: Apache-2.0

use serde::{Deserialize, Serialize};

use crate::sits::TimeSeries;
use crate::time::Day;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MowingParams {
    pub min_pre: f64,
    pub min_drop: f64,
    pub max_window_days: i32,
    pub refractory_days: i32,
}

impl Default for MowingParams {
    fn default() -> Self {
        MowingParams { min_pre: 0.5, min_drop: 0.25, max_window_days: 15, refractory_days: 30 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MowingEvent {
    pub parcel_id: i32,
    pub event_day: Day,
    pub drop_magnitude: f64,
    pub pre_event_value: f64,
}

/// Sharp NDVI drops in a prepared series.
///
/// A drop ends at a sample whose value lies at least `min_drop` below the
/// highest sample of the preceding `max_window_days`, that high value being
/// at least `min_pre`. The drop is extended while values keep falling inside
/// the window. The event day is the start of the steepest segment of the
/// drop; events closer than `refractory_days` to the previous one are ignored.
pub fn detect_mowing(parcel_id: i32, ts: &TimeSeries, params: &MowingParams) -> Vec<MowingEvent> {
    let pts = ts.valid_points();
    let mut events: Vec<MowingEvent> = Vec::new();
    let mut j = 1;
    while j < pts.len() {
        let lo = (0..j).find(|&i| pts[j].0 .0 - pts[i].0 .0 <= params.max_window_days).unwrap_or(j);
        let Some(pre) = (lo..j).max_by(|&a, &b| pts[a].1.total_cmp(&pts[b].1).then(b.cmp(&a))) else {
            j += 1;
            continue;
        };
        let pre_v = pts[pre].1;
        if pre_v < params.min_pre || pre_v - pts[j].1 < params.min_drop {
            j += 1;
            continue;
        }
        let mut end = j;
        while end + 1 < pts.len() && pts[end + 1].1 < pts[end].1 && pts[end + 1].0 .0 - pts[pre].0 .0 <= params.max_window_days {
            end += 1;
        }
        let steepest = (pre..end)
            .min_by(|&a, &b| slope(&pts, a).total_cmp(&slope(&pts, b)).then(a.cmp(&b)))
            .expect("drop spans at least one segment");
        let day = pts[steepest].0;
        if events.last().is_none_or(|e| day.0 - e.event_day.0 >= params.refractory_days) {
            events.push(MowingEvent { parcel_id, event_day: day, drop_magnitude: pre_v - pts[end].1, pre_event_value: pre_v });
        }
        j = end + 1;
    }
    events
}

fn slope(pts: &[(Day, f64)], i: usize) -> f64 {
    (pts[i + 1].1 - pts[i].1) / (pts[i + 1].0 .0 - pts[i].0 .0) as f64
}
