//! Steady-state performance measures computed from tail fractions.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fixedpoint::FixedPoint;
use crate::model::{FractionState, ModelConfig};
use crate::simulator::SimReport;

/// Multiplier applied to the last retained level when bounding the cut tail.
pub const K_SAFETY: f64 = 10.0;
/// Negative variances above this are rounding noise and are clamped to 0.
pub const VARIANCE_SLACK: f64 = 1e-12;

/// Read access to `(U_W,k)_{k>=0}` and `(U_R,l)_{l>=1}`; the `r` slice starts at
/// level 1.
pub trait TailFractions {
    fn tail_w(&self) -> &[f64];
    fn tail_r(&self) -> &[f64];

    fn w_at(&self, k: usize) -> f64 {
        self.tail_w().get(k).copied().unwrap_or(0.0)
    }

    fn r_at(&self, l: usize) -> f64 {
        if l == 0 {
            return 0.0;
        }
        self.tail_r().get(l - 1).copied().unwrap_or(0.0)
    }

    fn levels(&self) -> usize {
        self.tail_w().len().saturating_sub(1).max(self.tail_r().len())
    }
}

impl TailFractions for FixedPoint {
    fn tail_w(&self) -> &[f64] {
        &self.pi_w
    }
    fn tail_r(&self) -> &[f64] {
        &self.pi_r
    }
}

impl TailFractions for FractionState {
    fn tail_w(&self) -> &[f64] {
        self.uw()
    }
    fn tail_r(&self) -> &[f64] {
        self.ur()
    }
}

impl TailFractions for SimReport {
    fn tail_w(&self) -> &[f64] {
        &self.uw_hat
    }
    fn tail_r(&self) -> &[f64] {
        &self.ur_hat
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    FixedPoint,
    Simulation,
}

/// Half-widths of the simulation measures, propagated to first order from the
/// per-level half-widths under an independence approximation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricHalfWidths {
    pub mean_q: f64,
    pub var_q: f64,
    pub availability: f64,
    pub failure_freq: f64,
    pub mf_throughput: f64,
    pub flow_imbalance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_q: f64,
    pub var_q: f64,
    pub availability: f64,
    pub failure_freq: f64,
    pub mf_throughput: f64,
    pub flow_imbalance: f64,
    pub source: Source,
    /// Bound on what the series measures lose to the truncation.
    pub trunc_err: f64,
    /// Solver residual; absent for simulations.
    pub residual: Option<f64>,
    pub half_widths: Option<MetricHalfWidths>,
}

pub fn mean_queue_length(t: &impl TailFractions) -> f64 {
    (1..=t.levels()).map(|k| t.w_at(k) + t.r_at(k)).sum()
}

/// `(w_K + r_K) * K_SAFETY` at the deepest retained level.
pub fn truncation_error(t: &impl TailFractions) -> f64 {
    let k = t.levels();
    (t.w_at(k) + t.r_at(k)) * K_SAFETY
}

pub fn var_queue_length(t: &impl TailFractions) -> Result<f64> {
    let mut second = 0.0;
    let mut first = 0.0;
    for k in 1..=t.levels() {
        let s = t.w_at(k) + t.r_at(k);
        second += (2 * k - 1) as f64 * s;
        first += s;
    }
    let v = second - first * first;
    if v >= 0.0 {
        Ok(v)
    } else if v > -VARIANCE_SLACK {
        warn!("clamping variance {v:e} to 0");
        Ok(0.0)
    } else {
        Err(Error::NegativeVariance(v))
    }
}

pub fn availability(t: &impl TailFractions) -> f64 {
    t.w_at(0)
}

pub fn failure_frequency(t: &impl TailFractions, alpha: f64) -> f64 {
    alpha * t.w_at(1)
}

/// `(MF-TH, F) = (mu w_1, lambda - mu w_1)`.
pub fn flow_balance(t: &impl TailFractions, model: &ModelConfig) -> (f64, f64) {
    let th = model.mu * t.w_at(1);
    (th, model.lambda - th)
}

fn evaluate(t: &impl TailFractions, model: &ModelConfig, source: Source) -> Result<MetricsReport> {
    let (mf_throughput, flow_imbalance) = flow_balance(t, model);
    Ok(MetricsReport {
        mean_q: mean_queue_length(t),
        var_q: var_queue_length(t)?,
        availability: availability(t),
        failure_freq: failure_frequency(t, model.alpha),
        mf_throughput,
        flow_imbalance,
        source,
        trunc_err: truncation_error(t),
        residual: None,
        half_widths: None,
    })
}

pub fn metrics_from_fixed_point(fp: &FixedPoint, model: &ModelConfig) -> Result<MetricsReport> {
    let mut m = evaluate(fp, model, Source::FixedPoint)?;
    m.residual = Some(fp.residual);
    Ok(m)
}

pub fn metrics_from_simulation(report: &SimReport, model: &ModelConfig) -> Result<MetricsReport> {
    let mut m = evaluate(report, model, Source::Simulation)?;
    let hw_w = |k: usize| report.half_width_w.get(k).copied().unwrap_or(0.0);
    let hw_r = |l: usize| {
        if l == 0 {
            0.0
        } else {
            report.half_width_r.get(l - 1).copied().unwrap_or(0.0)
        }
    };
    let mut mean_sq = 0.0;
    let mut var_sq = 0.0;
    for k in 1..=report.levels() {
        let h2 = hw_w(k).powi(2) + hw_r(k).powi(2);
        mean_sq += h2;
        let grad = (2 * k - 1) as f64 - 2.0 * m.mean_q;
        var_sq += grad * grad * h2;
    }
    let h1 = hw_w(1);
    m.half_widths = Some(MetricHalfWidths {
        mean_q: mean_sq.sqrt(),
        var_q: var_sq.sqrt(),
        availability: hw_w(0),
        failure_freq: model.alpha * h1,
        mf_throughput: model.mu * h1,
        flow_imbalance: model.mu * h1,
    });
    Ok(m)
}
