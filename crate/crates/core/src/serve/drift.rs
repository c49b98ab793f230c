//! Sliding-window drift monitor over detection counts and scores.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pipeline::DetectionMessage;

#[derive(Debug, Error, PartialEq)]
#[error("drift window length must be at least 2, got {0}")]
pub struct DriftWindowError(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftConfig {
    pub window_len: usize,
    /// Expected detections per image (from the training distribution).
    pub reference_count_mean: f64,
    pub count_threshold: f64,
    /// Expected mean detection score; score drift is not checked when unset.
    #[serde(default)]
    pub reference_score_mean: Option<f64>,
    #[serde(default)]
    pub score_threshold: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftMetric {
    Count,
    Score,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftAlert {
    pub metric: DriftMetric,
    pub window_mean: f64,
    pub reference_mean: f64,
    pub threshold: f64,
    pub window_len: usize,
}

#[derive(Debug, Clone)]
pub struct DriftState {
    cfg: DriftConfig,
    counts: VecDeque<f64>,
    scores: VecDeque<f64>,
    /// Updates left before another alert may fire.
    quiet_for: usize,
}

impl DriftState {
    pub fn new(cfg: DriftConfig) -> Result<Self, DriftWindowError> {
        if cfg.window_len < 2 {
            return Err(DriftWindowError(cfg.window_len));
        }
        Ok(Self {
            counts: VecDeque::with_capacity(cfg.window_len),
            scores: VecDeque::with_capacity(cfg.window_len),
            cfg,
            quiet_for: 0,
        })
    }

    pub fn window(&self) -> impl Iterator<Item = &f64> {
        self.counts.iter()
    }

    pub fn config(&self) -> &DriftConfig {
        &self.cfg
    }
}

fn push_bounded(q: &mut VecDeque<f64>, v: f64, cap: usize) {
    if q.len() == cap {
        q.pop_front();
    }
    q.push_back(v);
}

fn mean(q: &VecDeque<f64>) -> f64 {
    q.iter().sum::<f64>() / q.len() as f64
}

/// Records one detection message; returns an alert when a full window's
/// mean strays from the reference by more than the threshold. At most one
/// alert fires per `window_len` updates.
pub fn drift_update(state: &mut DriftState, msg: &DetectionMessage) -> Option<DriftAlert> {
    let cap = state.cfg.window_len;
    push_bounded(&mut state.counts, msg.boxes.len() as f64, cap);
    if !msg.boxes.is_empty() {
        let s = msg.boxes.iter().map(|b| b.score).sum::<f64>() / msg.boxes.len() as f64;
        push_bounded(&mut state.scores, s, cap);
    }
    if state.quiet_for > 0 {
        state.quiet_for -= 1;
        return None;
    }
    let mut alert = None;
    if state.counts.len() == cap {
        let m = mean(&state.counts);
        if (m - state.cfg.reference_count_mean).abs() > state.cfg.count_threshold {
            alert = Some(DriftAlert {
                metric: DriftMetric::Count,
                window_mean: m,
                reference_mean: state.cfg.reference_count_mean,
                threshold: state.cfg.count_threshold,
                window_len: cap,
            });
        }
    }
    if alert.is_none() && state.scores.len() == cap {
        if let (Some(r), Some(t)) = (state.cfg.reference_score_mean, state.cfg.score_threshold) {
            let m = mean(&state.scores);
            if (m - r).abs() > t {
                alert = Some(DriftAlert {
                    metric: DriftMetric::Score,
                    window_mean: m,
                    reference_mean: r,
                    threshold: t,
                    window_len: cap,
                });
            }
        }
    }
    if alert.is_some() {
        state.quiet_for = cap - 1;
    }
    alert
}
