//! Localization objectives on similarity peaks.
//!
//! - weakly supervised: `(1/M) Σ log(1 + exp(α (peak_neg - peak_pos)))`
//! - GPS window: `|Peak(P) - Peak(P restricted to ±⌈d/β⌉ around the label)|`
//! - total: `weakly + λ₁ · gps`
//!
//! Peaks are differentiated as selections: the gradient flows only into the
//! cell chosen in the forward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{peak, peak_in_window, PeakResult, SimilarityMap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    /// GPS label uncertainty radius in metres.
    pub d: f64,
    /// 0 or 1.
    pub lambda1: u8,
    /// Number of negative satellite maps.
    pub negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            d: 5.0,
            lambda1: 0,
            negatives: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !(self.d > 0.0) {
            return Err(Error::Config(format!("alpha and d must be positive, got {} and {}", self.alpha, self.d)));
        }
        if self.lambda1 > 1 {
            return Err(Error::Config(format!("lambda1 must be 0 or 1, got {}", self.lambda1)));
        }
        if self.negatives == 0 {
            return Err(Error::Config("at least one negative is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_weakly: f64,
    pub l_gps: f64,
    pub l_total: f64,
    pub lambda1: u8,
    pub alpha: f64,
    pub d: f64,
}

/// `log(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    crate::primitives::sigmoid(x)
}

pub fn weakly_loss(peak_pos: f64, peaks_neg: &[f64], alpha: f64) -> Result<f64> {
    if peaks_neg.is_empty() {
        return Err(Error::domain("weakly supervised loss needs at least one negative"));
    }
    let m = peaks_neg.len() as f64;
    Ok(peaks_neg.iter().map(|&n| softplus(alpha * (n - peak_pos))).sum::<f64>() / m)
}

/// Gradients of [`weakly_loss`] with respect to the positive peak and each
/// negative peak.
pub fn weakly_loss_backward(peak_pos: f64, peaks_neg: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let m = peaks_neg.len() as f64;
    let d_neg: Vec<f64> = peaks_neg
        .iter()
        .map(|&n| alpha / m * sigmoid(alpha * (n - peak_pos)))
        .collect();
    (-d_neg.iter().sum::<f64>(), d_neg)
}

/// The two peaks entering the GPS term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpsTerm {
    pub value: f64,
    pub global: PeakResult,
    pub window: PeakResult,
}

/// Window half-width in cells: `⌈d/β⌉`.
pub fn gps_half_width(d: f64, beta: f64) -> i64 {
    (d / beta).ceil() as i64
}

/// `label` is an offset (Δrow, Δcol) in the map's index space.
pub fn gps_loss(p_pos: &SimilarityMap, label: (i64, i64), d: f64, beta: f64) -> Result<GpsTerm> {
    let r = p_pos.radius as i64;
    if label.0.abs() > r || label.1.abs() > r {
        return Err(Error::domain(format!("label {label:?} outside the ±{r} search window")));
    }
    if !(d > 0.0) || !(beta > 0.0) {
        return Err(Error::domain("d and beta must be positive"));
    }
    let global = peak(p_pos);
    let window = peak_in_window(p_pos, label, gps_half_width(d, beta))
        .ok_or_else(|| Error::domain("GPS window is empty after clipping"))?;
    Ok(GpsTerm {
        value: (global.value - window.value).abs(),
        global,
        window,
    })
}

/// Subgradient of the GPS term onto the similarity cells it selected:
/// ±1 into the global and window argmax cells, nothing when they agree.
pub fn gps_loss_backward(term: &GpsTerm) -> Vec<((i64, i64), f64)> {
    let diff = term.global.value - term.window.value;
    if diff == 0.0 || term.global.offset == term.window.offset {
        return Vec::new();
    }
    let sign = diff.signum();
    vec![(term.global.offset, sign), (term.window.offset, -sign)]
}

pub fn total_loss(l_weakly: f64, l_gps: f64, lambda1: u8) -> f64 {
    l_weakly + lambda1 as f64 * l_gps
}

/// Evaluates all terms for one query.
pub fn evaluate(p_pos: &SimilarityMap, p_negs: &[SimilarityMap], label: (i64, i64), cfg: &LossConfig) -> Result<(LossReport, GpsTerm)> {
    let pos = peak(p_pos).value;
    let negs: Vec<f64> = p_negs.iter().map(|m| peak(m).value).collect();
    let l_weakly = weakly_loss(pos, &negs, cfg.alpha)?;
    let gps = gps_loss(p_pos, label, cfg.d, p_pos.beta)?;
    let l_gps = gps.value;
    Ok((
        LossReport {
            l_weakly,
            l_gps,
            l_total: total_loss(l_weakly, l_gps, cfg.lambda1),
            lambda1: cfg.lambda1,
            alpha: cfg.alpha,
            d: cfg.d,
        },
        gps,
    ))
}
